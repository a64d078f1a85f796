//! Synthetic teacher-student tasks.
//!
//! A frozen, randomly initialized teacher with the student's architecture
//! labels Gaussian inputs. Every batch is a pure function of
//! `(task seed, data cursor)`, so replaying a cursor replays the data.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BlockInit, Model, ModelSpec, Targets, Task};
use crate::rng::{self, Domain};

pub const VALIDATION_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Seeds the teacher, the training stream and the validation set.
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to regression targets,
    /// relative to the (unit-normalized) teacher output.
    pub label_noise: f64,
    /// Scale of the teacher's block weights relative to the default init.
    pub teacher_gain: f64,
    pub validation_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label_noise: 0.0,
            teacher_gain: 1.0,
            validation_size: VALIDATION_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            inputs: self.inputs.slice(ndarray::s![range.clone(), ..]).to_owned(),
            targets: self.targets.slice_rows(range),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    config: TaskConfig,
    spec: ModelSpec,
    teacher: Model,
    /// Divides teacher outputs so regression targets have unit mean square.
    output_scale: f64,
    batch_size: usize,
    validation: Batch,
}

impl Dataset {
    pub fn new(spec: &ModelSpec, config: TaskConfig, batch_size: usize) -> Result<Self> {
        let teacher = Model::init_from_stream(
            spec,
            config.seed,
            Domain::TeacherInit,
            BlockInit::new(config.teacher_gain, 0.0)?,
            1.0,
        )?;
        let mut ds = Self {
            spec: spec.clone(),
            teacher,
            output_scale: 1.0,
            batch_size,
            validation: Batch {
                inputs: Array2::zeros((0, spec.input_dim)),
                targets: Targets::Classes(Vec::new()),
            },
            config,
        };
        let calib = ds.gaussian_inputs(Domain::ValidationData, u64::MAX, 4096);
        let raw = ds.teacher.predict(calib.view())?;
        let ms = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
        ds.output_scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
        ds.validation = ds.make_batch(Domain::ValidationData, 0, ds.config.validation_size)?;
        Ok(ds)
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Training batch number `cursor`.
    pub fn train_batch(&self, cursor: u64) -> Result<Batch> {
        self.make_batch(Domain::TrainData, cursor, self.batch_size)
    }

    pub fn validation(&self) -> &Batch {
        &self.validation
    }

    /// First `n` validation rows.
    pub fn probe(&self, n: usize) -> Batch {
        self.validation.slice(0..n.min(self.validation.rows()))
    }

    fn gaussian_inputs(&self, domain: Domain, index: u64, rows: usize) -> Array2<f64> {
        let mut r = rng::stream(self.config.seed, domain, index);
        Array2::from_shape_fn((rows, self.spec.input_dim), |_| r.sample(StandardNormal))
    }

    fn make_batch(&self, domain: Domain, index: u64, rows: usize) -> Result<Batch> {
        let inputs = self.gaussian_inputs(domain, index, rows);
        let raw = self.teacher.predict(inputs.view())? / self.output_scale;
        let targets = match self.spec.task {
            Task::Regression => {
                let mut t = raw;
                if self.config.label_noise > 0.0 {
                    let mut r = rng::stream(
                        self.config.seed,
                        Domain::LabelNoise,
                        ((domain as u64) << 56) ^ index,
                    );
                    t.mapv_inplace(|v| {
                        let n: f64 = r.sample(StandardNormal);
                        v + self.config.label_noise * n
                    });
                }
                Targets::Values(t)
            }
            Task::Classification => Targets::Classes(
                raw.axis_iter(Axis(0))
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                                if v > best.1 {
                                    (j, v)
                                } else {
                                    best
                                }
                            })
                            .0
                    })
                    .collect(),
            ),
        };
        Ok(Batch { inputs, targets })
    }
}
