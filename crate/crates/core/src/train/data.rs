//! Synthetic image classification data: one Gaussian blob per image, placed
//! and coloured by class, plus pixel noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What distinguishes the classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobStyle {
    /// Class-specific colour and position.
    Colored,
    /// One shared colour; only the position tells classes apart.
    Positional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataParams {
    pub classes: usize,
    pub resolution: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Standard deviation of additive pixel noise.
    pub sigma: f64,
    /// Maximum blob displacement in pixels along each axis.
    pub jitter: usize,
    pub style: BlobStyle,
    pub seed: u64,
}

impl DataParams {
    /// Four colour-and-position classes at 32², 256 train / 128 eval.
    pub fn blobs(sigma: f64, seed: u64) -> Self {
        Self {
            classes: 4,
            resolution: 32,
            train_size: 256,
            eval_size: 128,
            sigma,
            jitter: 2,
            style: BlobStyle::Colored,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return bad(format!("resolution {} is not a positive multiple of 16", self.resolution));
        }
        for (what, n) in [("train", self.train_size), ("eval", self.eval_size)] {
            if n == 0 || n % self.classes != 0 {
                return bad(format!("{what} size {n} does not split evenly over {} classes", self.classes));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and non-negative", self.sigma));
        }
        if 2 * self.jitter >= self.resolution / 4 {
            return bad(format!("jitter {} too large for resolution {}", self.jitter, self.resolution));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    /// `[N, 3, R, R]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `idx`, in that order, and their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (_, c, h, w) = self.images.dims4()?;
        let per = c * h * w;
        let src = self.images.to_vec_f32();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Invalid(format!("sample {i} of {}", self.len())));
            }
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(out, &[idx.len(), c, h, w])?, labels))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub params: DataParams,
    pub train: Split,
    pub eval: Split,
}

/// Blob centre for `class`, on a ring around the image centre.
fn centre(class: usize, classes: usize, res: usize) -> (f64, f64) {
    let a = std::f64::consts::TAU * class as f64 / classes as f64;
    let (c, r) = (res as f64 / 2.0, res as f64 / 4.0);
    (c + r * a.cos(), c + r * a.sin())
}

fn colour(class: usize, style: BlobStyle) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, -0.5, -0.5],
        [-0.5, 1.0, -0.5],
        [-0.5, -0.5, 1.0],
        [1.0, 1.0, -0.5],
        [-0.5, 1.0, 1.0],
        [1.0, -0.5, 1.0],
    ];
    match style {
        BlobStyle::Positional => [1.0, 1.0, 1.0],
        BlobStyle::Colored => PALETTE[class % PALETTE.len()],
    }
}

fn render(p: &DataParams, n: usize, rng: &mut Rng) -> Result<Split> {
    let r = p.resolution;
    let radius = r as f64 / 8.0;
    let mut labels: Vec<usize> = (0..n).map(|i| i % p.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * 3 * r * r);
    for &label in &labels {
        let (mut cy, mut cx) = centre(label, p.classes, r);
        if p.jitter > 0 {
            let span = 2 * p.jitter + 1;
            cy += rng.below(span) as f64 - p.jitter as f64;
            cx += rng.below(span) as f64 - p.jitter as f64;
        }
        let rgb = colour(label, p.style);
        for ch in rgb {
            for y in 0..r {
                for x in 0..r {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let v = ch * (-d2 / (2.0 * radius * radius)).exp();
                    let noise = if p.sigma > 0.0 { p.sigma * rng.normal() } else { 0.0 };
                    data.push((v + noise) as f32);
                }
            }
        }
    }
    Ok(Split {
        images: Tensor::from_vec(data, &[n, 3, r, r])?,
        labels,
    })
}

/// Generates train and eval splits from independent streams of `params.seed`.
pub fn gen_dataset(params: &DataParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let mut rng = Rng::new(params.seed);
    let mut train_rng = rng.fork();
    let mut eval_rng = rng.fork();
    Ok(SyntheticDataset {
        params: params.clone(),
        train: render(params, params.train_size, &mut train_rng)?,
        eval: render(params, params.eval_size, &mut eval_rng)?,
    })
}
