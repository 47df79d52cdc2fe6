//! Synthetic proposal features: isotropic Gaussian class clusters whose means
//! lie on a sphere, plus unlabeled-only distractors centred at the origin.
//!
//! File format (plain text, one record per line):
//!
//! ```text
//! C d_in
//! split,class,feat_0,...,feat_{d-1}
//! ```
//!
//! `split` is `labeled`, `unlabeled` or `test`; `class` is `-1` for
//! distractors. Features are written in shortest round-trip decimal form, so
//! export/import is bitwise lossless.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub d_in: usize,
    /// Radius of the sphere the class means are drawn on.
    pub r_sep: f64,
    pub sigma_cluster: f64,
    /// Size of the full labeled pool (split evenly across classes).
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Fraction of the labeled pool that is actually emitted as labeled.
    pub labeled_fraction: f64,
    pub n_distractors: usize,
    pub distractor_spread: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            d_in: 32,
            r_sep: 3.0,
            sigma_cluster: 1.2,
            n_labeled: 400,
            n_unlabeled: 400,
            n_test: 400,
            labeled_fraction: 0.25,
            n_distractors: 40,
            distractor_spread: 1.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.d_in == 0 {
            return Err(Error::Config("num_classes and d_in must be >= 1".into()));
        }
        if !(self.sigma_cluster > 0.0 && self.sigma_cluster.is_finite()) {
            return Err(Error::Config(format!("sigma_cluster must be > 0, got {}", self.sigma_cluster)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if !(self.r_sep >= 0.0 && self.r_sep.is_finite()) || !(self.distractor_spread >= 0.0) {
            return Err(Error::Config("r_sep and distractor_spread must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Labeled samples per class after applying the labeled fraction.
    pub fn labeled_per_class(&self) -> usize {
        let pool = self.n_labeled / self.num_classes;
        (pool as f64 * self.labeled_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSample {
    pub features: Vec<f64>,
    /// `None` for distractors.
    pub true_class: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub d_in: usize,
    pub samples: Vec<ProposalSample>,
}

/// The view of a dataset that training is allowed to see: labeled pairs and
/// bare unlabeled features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub num_classes: usize,
    pub d_in: usize,
    pub labeled: Vec<(Vec<f64>, usize)>,
    pub unlabeled: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProposalSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn training_data(&self) -> TrainingData {
        TrainingData {
            num_classes: self.num_classes,
            d_in: self.d_in,
            labeled: self
                .split(Split::Labeled)
                .filter_map(|s| Some((s.features.clone(), s.true_class?)))
                .collect(),
            unlabeled: self.split(Split::Unlabeled).map(|s| s.features.clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.num_classes, self.d_in);
        for s in &self.samples {
            let class = s.true_class.map_or(-1, |c| c as i64);
            write!(out, "{},{}", s.split.as_str(), class).expect("writing to a String");
            for v in &s.features {
                write!(out, ",{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }

    /// Parses the whole input before returning; any malformed or truncated
    /// record fails the read.
    pub fn read<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |line: &mut String, lineno: &mut usize| -> Result<bool> {
            line.clear();
            let n = reader.read_line(line)?;
            if n == 0 {
                return Ok(false);
            }
            *lineno += 1;
            if !line.ends_with('\n') {
                return Err(Error::Parse {
                    line: *lineno,
                    message: "truncated record (missing line terminator)".into(),
                });
            }
            line.pop();
            if line.ends_with('\r') {
                line.pop();
            }
            Ok(true)
        };
        if !next_line(&mut line, &mut lineno)? {
            return Err(Error::Parse {
                line: 1,
                message: "missing header line `C d_in`".into(),
            });
        }
        let header: Vec<&str> = line.split_whitespace().collect();
        let parse_usize = |s: &str, what: &str, line: usize| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad {what} `{s}`: {e}"),
            })
        };
        if header.len() != 2 {
            return Err(Error::Parse {
                line: 1,
                message: format!("header must be `C d_in`, got `{line}`"),
            });
        }
        let num_classes = parse_usize(header[0], "class count", 1)?;
        let d_in = parse_usize(header[1], "feature dimension", 1)?;

        let mut samples = Vec::new();
        while next_line(&mut line, &mut lineno)? {
            if line.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "empty record".into(),
                });
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d_in + 2 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {} fields, found {}", d_in + 2, fields.len()),
                });
            }
            let split = match fields[0] {
                "labeled" => Split::Labeled,
                "unlabeled" => Split::Unlabeled,
                "test" => Split::Test,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unknown split `{other}`"),
                    })
                }
            };
            let class: i64 = fields[1].parse().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad class `{}`: {e}", fields[1]),
            })?;
            let true_class = match class {
                -1 if split == Split::Unlabeled => None,
                c if c >= 0 && (c as usize) < num_classes => Some(c as usize),
                c => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("class {c} invalid for split {} with C={num_classes}", split.as_str()),
                    })
                }
            };
            let features = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        line: lineno,
                        message: format!("bad feature `{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(ProposalSample {
                features,
                true_class,
                split,
            });
        }
        Ok(Self {
            num_classes,
            d_in,
            samples,
        })
    }
}

const STREAM_MEANS: u64 = 0x4d45_414e;
const STREAM_LABELED: u64 = 0x4c41_4245;
const STREAM_UNLABELED: u64 = 0x554e_4c42;
const STREAM_TEST: u64 = 0x5445_5354;
const STREAM_DISTRACTOR: u64 = 0x4449_5354;

/// Class means: standard normal directions rescaled to radius `r_sep`.
pub fn cluster_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(spec.seed).fork(STREAM_MEANS);
    (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.d_in).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm * spec.r_sep).collect()
        })
        .collect()
}

/// Draws all three splits. Each split has its own random stream, so changing
/// the labeled fraction leaves the unlabeled and test data untouched.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = cluster_means(spec);
    let root = Rng::new(spec.seed);
    let c = spec.num_classes;
    let mut samples = Vec::new();

    let draw = |rng: &mut Rng, class: usize| -> Vec<f64> {
        means[class].iter().map(|m| m + spec.sigma_cluster * rng.normal()).collect()
    };

    let emit = |rng: &mut Rng, rounds: usize, keep: usize, split: Split, samples: &mut Vec<ProposalSample>| {
        for round in 0..rounds {
            for class in 0..c {
                let features = draw(rng, class);
                if round < keep {
                    samples.push(ProposalSample {
                        features,
                        true_class: Some(class),
                        split,
                    });
                }
            }
        }
    };

    let pool = spec.n_labeled / c;
    emit(&mut root.fork(STREAM_LABELED), pool, spec.labeled_per_class(), Split::Labeled, &mut samples);
    let n_u = spec.n_unlabeled / c;
    emit(&mut root.fork(STREAM_UNLABELED), n_u, n_u, Split::Unlabeled, &mut samples);
    let mut drng = root.fork(STREAM_DISTRACTOR);
    for _ in 0..spec.n_distractors {
        samples.push(ProposalSample {
            features: (0..spec.d_in).map(|_| spec.distractor_spread * drng.normal()).collect(),
            true_class: None,
            split: Split::Unlabeled,
        });
    }
    let n_t = spec.n_test / c;
    emit(&mut root.fork(STREAM_TEST), n_t, n_t, Split::Test, &mut samples);

    Ok(Dataset {
        num_classes: c,
        d_in: spec.d_in,
        samples,
    })
}
