//! Synthetic datasets and class-/domain-incremental task sequences.

pub mod glyphs;
mod io;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub domain_id: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn empty(n_classes: usize, channels: usize, size: usize) -> Self {
        Dataset {
            images: Tensor::zeros(vec![0, channels, size, size]),
            labels: vec![],
            n_classes,
            domain_id: 0,
            class_names: class_names(n_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Gathers samples `idx` into one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * sl);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sl..(i + 1) * sl]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("batch shape")
    }

    fn append(&mut self, other: &Dataset) {
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut data = std::mem::replace(&mut self.images, Tensor::zeros(vec![0])).into_data();
        data.extend_from_slice(other.images.data());
        self.images = Tensor::new(shape, data).expect("append shape");
        self.labels.extend_from_slice(&other.labels);
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("glyph-{c:03}")).collect()
}

/// Samples `first..first + count` of every class, class-major.
pub fn generate_range(n_classes: usize, first: usize, count: usize, image_size: usize, channels: usize, domain: usize, seed: u64) -> Dataset {
    let sl = channels * image_size * image_size;
    let mut data = Vec::with_capacity(n_classes * count * sl);
    let mut labels = Vec::with_capacity(n_classes * count);
    for c in 0..n_classes {
        for i in first..first + count {
            data.extend(glyphs::render(c, domain, i, seed, image_size, channels));
            labels.push(c);
        }
    }
    Dataset {
        images: Tensor::new(vec![labels.len(), channels, image_size, image_size], data).expect("generated shape"),
        labels,
        n_classes,
        domain_id: domain,
        class_names: class_names(n_classes),
    }
}

/// `per_class` RGB images of every class on the background of `domain`.
pub fn generate_synthetic(n_classes: usize, per_class: usize, image_size: usize, domain: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || per_class < 2 {
        return Err(MindError::Config("need at least 2 classes and 2 samples per class".into()));
    }
    Ok(generate_range(n_classes, 0, per_class, image_size, 3, domain, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Ci,
    Di,
}

/// Scenario section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_classes: usize,
    /// Number of tasks; in DI each task is one domain.
    pub n_tasks: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Held-out samples per class for temperature tuning.
    #[serde(default)]
    pub per_class_val: usize,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Fixes the generated data independently of the run seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
}

fn three() -> usize {
    3
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Ci,
            n_classes: 10,
            n_tasks: 5,
            per_class_train: 100,
            per_class_test: 20,
            per_class_val: 0,
            image_size: 32,
            channels: 3,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Global class ids introduced (CI) or revisited (DI) by this task.
    pub classes: Vec<usize>,
    pub domain: usize,
    /// Indices into [`Scenario::train`].
    pub train: Vec<usize>,
    /// Indices into [`Scenario::test`].
    pub test: Vec<usize>,
    /// Indices into [`Scenario::val`].
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n_classes: usize,
    pub tasks: Vec<TaskSpec>,
    pub train: Dataset,
    pub test: Dataset,
    pub val: Dataset,
    /// Per-channel training mean and std applied to every split.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Scenario {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task whose class set contains `class` (CI), or `None` in DI.
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        match self.kind {
            ScenarioKind::Ci => self.tasks.iter().position(|t| t.classes.contains(&class)),
            ScenarioKind::Di => None,
        }
    }

    fn normalize(&mut self) {
        let c = self.train.sample_shape()[0];
        let plane = self.train.sample_len() / c;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for s in self.train.images.data().chunks(plane * c) {
            for ch in 0..c {
                for &v in &s[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.train.len() * plane).max(1) as f64;
        self.mean = sum.iter().map(|s| (s / n) as f32).collect();
        self.std = sum.iter().zip(&sq).map(|(s, q)| ((q / n - (s / n).powi(2)).max(1e-12).sqrt()) as f32).collect();
        for d in [&mut self.train, &mut self.test, &mut self.val] {
            for s in d.images.data_mut().chunks_mut(plane * c) {
                for ch in 0..c {
                    for v in &mut s[ch * plane..(ch + 1) * plane] {
                        *v = (*v - self.mean[ch]) / self.std[ch];
                    }
                }
            }
        }
    }
}

fn indices_by_class(d: &Dataset, classes: &[usize]) -> Vec<usize> {
    (0..d.len()).filter(|&i| classes.contains(&d.labels[i])).collect()
}

/// Splits a class-major dataset into disjoint class groups. The last
/// `per_class_test` samples of every class form the test split.
pub fn build_ci_scenario(dataset: &Dataset, n_tasks: usize, per_class_test: usize, seed: u64) -> Result<Scenario> {
    let m = dataset.n_classes;
    if n_tasks == 0 || !m.is_multiple_of(n_tasks) {
        return Err(MindError::Config(format!("{m} classes cannot be split equally into {n_tasks} tasks")));
    }
    let counts = dataset.class_counts();
    if let Some(c) = counts.iter().position(|&n| n <= per_class_test) {
        return Err(MindError::Config(format!(
            "class {c} has {} samples, needs more than {per_class_test}",
            counts[c]
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut glyphs::stream(&[0xC1A5, seed]));

    let mut seen = vec![0usize; m];
    let (mut tr_idx, mut te_idx) = (vec![], vec![]);
    for (i, &l) in dataset.labels.iter().enumerate() {
        if seen[l] < counts[l] - per_class_test {
            tr_idx.push(i);
        } else {
            te_idx.push(i);
        }
        seen[l] += 1;
    }
    let pick = |idx: &[usize]| {
        let mut d = Dataset::empty(m, dataset.sample_shape()[0], dataset.sample_shape()[1]);
        d.images = dataset.batch(idx);
        d.labels = idx.iter().map(|&i| dataset.labels[i]).collect();
        d.domain_id = dataset.domain_id;
        d
    };
    let train = pick(&tr_idx);
    let test = pick(&te_idx);
    let val = Dataset::empty(m, dataset.sample_shape()[0], dataset.sample_shape()[1]);
    let per = m / n_tasks;
    let tasks = order
        .chunks(per)
        .enumerate()
        .map(|(t, cls)| TaskSpec {
            task_id: t,
            classes: cls.to_vec(),
            domain: dataset.domain_id,
            train: indices_by_class(&train, cls),
            test: indices_by_class(&test, cls),
            val: vec![],
        })
        .collect();
    let mut s = Scenario {
        kind: ScenarioKind::Ci,
        n_classes: m,
        tasks,
        train,
        test,
        val,
        mean: vec![],
        std: vec![],
    };
    s.normalize();
    Ok(s)
}

/// Builds a scenario from its config section, generating all data.
pub fn build_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    if spec.n_classes < 2 || spec.per_class_train < 1 || spec.per_class_test < 1 {
        return Err(MindError::Config("scenario needs ≥2 classes and ≥1 train/test sample per class".into()));
    }
    let data_seed = spec.data_seed.unwrap_or(seed);
    let (size, ch) = (spec.image_size, spec.channels);
    match spec.kind {
        ScenarioKind::Ci => {
            let per = spec.per_class_train + spec.per_class_test;
            let full = generate_range(spec.n_classes, 0, per, size, ch, 0, data_seed);
            let mut s = build_ci_scenario(&full, spec.n_tasks, spec.per_class_test, seed)?;
            if spec.per_class_val > 0 {
                s.val = generate_range(spec.n_classes, per, spec.per_class_val, size, ch, 0, data_seed);
                normalize_with(&mut s.val, &s.mean, &s.std);
                for t in &mut s.tasks {
                    t.val = indices_by_class(&s.val, &t.classes);
                }
            }
            Ok(s)
        }
        ScenarioKind::Di => build_di_scenario(spec, data_seed),
    }
}

fn normalize_with(d: &mut Dataset, mean: &[f32], std: &[f32]) {
    let c = mean.len();
    if d.is_empty() || c == 0 {
        return;
    }
    let plane = d.sample_len() / c;
    for s in d.images.data_mut().chunks_mut(plane * c) {
        for ch in 0..c {
            for v in &mut s[ch * plane..(ch + 1) * plane] {
                *v = (*v - mean[ch]) / std[ch];
            }
        }
    }
}

/// One task per background domain; every task sees the same classes.
pub fn build_di_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    if spec.n_tasks < 2 {
        return Err(MindError::Config("domain-incremental scenarios need at least 2 domains".into()));
    }
    let (m, size, ch) = (spec.n_classes, spec.image_size, spec.channels);
    let mut train = Dataset::empty(m, ch, size);
    let mut test = Dataset::empty(m, ch, size);
    let mut val = Dataset::empty(m, ch, size);
    let mut tasks = vec![];
    let (ntr, nte, nva) = (spec.per_class_train, spec.per_class_test, spec.per_class_val);
    for d in 0..spec.n_tasks {
        let (a, b, c) = (train.len(), test.len(), val.len());
        train.append(&generate_range(m, 0, ntr, size, ch, d, seed));
        test.append(&generate_range(m, ntr, nte, size, ch, d, seed));
        if nva > 0 {
            val.append(&generate_range(m, ntr + nte, nva, size, ch, d, seed));
        }
        tasks.push(TaskSpec {
            task_id: d,
            classes: (0..m).collect(),
            domain: d,
            train: (a..train.len()).collect(),
            test: (b..test.len()).collect(),
            val: (c..val.len()).collect(),
        });
    }
    let mut s = Scenario {
        kind: ScenarioKind::Di,
        n_classes: m,
        tasks,
        train,
        test,
        val,
        mean: vec![],
        std: vec![],
    };
    s.normalize();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ScenarioKind, n_tasks: usize) -> ScenarioSpec {
        ScenarioSpec {
            kind,
            n_classes: 10,
            n_tasks,
            per_class_train: 6,
            per_class_test: 3,
            per_class_val: 2,
            image_size: 8,
            channels: 3,
            data_seed: None,
        }
    }

    #[test]
    fn same_arguments_render_identical_images() {
        let a = glyphs::render(3, 1, 7, 42, 16, 3);
        let b = glyphs::render(3, 1, 7, 42, 16, 3);
        assert_eq!(a, b);
        assert_ne!(a, glyphs::render(3, 1, 8, 42, 16, 3));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generator_rejects_degenerate_sizes() {
        assert!(generate_synthetic(1, 10, 8, 0, 0).is_err());
        assert!(generate_synthetic(2, 1, 8, 0, 0).is_err());
        let d = generate_synthetic(2, 3, 8, 0, 0).unwrap();
        assert_eq!(d.images.shape(), &[6, 3, 8, 8]);
        assert_eq!(d.class_counts(), vec![3, 3]);
    }

    #[test]
    fn ci_tasks_partition_the_classes() {
        let s = build_scenario(&small(ScenarioKind::Ci, 5), 3).unwrap();
        assert_eq!(s.n_tasks(), 5);
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        for t in &s.tasks {
            assert_eq!(t.classes.len(), 2);
            assert_eq!(t.train.len(), 12);
            assert_eq!(t.test.len(), 6);
            assert_eq!(t.val.len(), 4);
            for &i in &t.train {
                assert!(t.classes.contains(&s.train.labels[i]));
            }
        }
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // test stream covers all classes
        assert!(s.test.class_counts().iter().all(|&c| c == 3));
    }

    #[test]
    fn ci_rejects_unequal_split() {
        let err = build_scenario(&small(ScenarioKind::Ci, 3), 0).unwrap_err();
        assert!(matches!(err, MindError::Config(_)));
    }

    #[test]
    fn di_tasks_share_classes() {
        let s = build_scenario(&small(ScenarioKind::Di, 3), 1).unwrap();
        assert_eq!(s.n_tasks(), 3);
        for t in &s.tasks {
            assert_eq!(t.classes, (0..10).collect::<Vec<_>>());
            assert_eq!(t.train.len(), 60);
            assert_eq!(t.test.len(), 30);
        }
        // domains differ
        assert_ne!(s.train.batch(&[0]).data(), s.train.batch(&[60]).data());
    }

    #[test]
    fn scenario_is_seed_deterministic() {
        let a = build_scenario(&small(ScenarioKind::Ci, 5), 9).unwrap();
        let b = build_scenario(&small(ScenarioKind::Ci, 5), 9).unwrap();
        assert_eq!(a, b);
        let c = build_scenario(&small(ScenarioKind::Ci, 5), 10).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn training_split_is_standardized() {
        let s = build_scenario(&small(ScenarioKind::Ci, 5), 2).unwrap();
        let plane = 64;
        let mut sum = 0f64;
        let mut n = 0;
        for img in s.train.images.data().chunks(3 * plane) {
            for &v in &img[..plane] {
                sum += v as f64;
                n += 1;
            }
        }
        assert!((sum / n as f64).abs() < 1e-4);
    }
}
