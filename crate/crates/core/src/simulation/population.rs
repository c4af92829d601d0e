use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::SimulationSpec;

/// Generator parameters of one count-valued covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousParams {
    /// Probability of a structural zero.
    pub zero_prob: f64,
    /// Gamma shape of the Poisson rate; smaller is more dispersed.
    pub shape: f64,
    /// Mean of the nonzero part minus one.
    pub mean: f64,
}

/// A binary covariate whose log-odds depend on two count columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryParams {
    pub intercept: f64,
    pub sources: [usize; 2],
    pub slopes: [f64; 2],
}

/// Hidden treatment-selection and outcome process of the base population.
/// Both act on `log1p` of the counts and on the binary columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub selection_intercept: f64,
    pub selection: Vec<f64>,
    /// Coefficient of the product of the first two transformed counts.
    pub selection_pair: f64,
    /// Shift in log-odds once the third transformed count passes 1.5.
    pub selection_step: f64,
    pub outcome_intercept: Vec<f64>,
    pub outcome: Vec<Vec<f64>>,
    /// Coefficient of the squared first transformed count.
    pub outcome_curvature: Vec<f64>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub continuous: Vec<ContinuousParams>,
    pub binary: Vec<BinaryParams>,
    pub latent: LatentParams,
}

/// Stream of the seeded generator reserved for parameter draws.
const PARAM_STREAM: u64 = u64::MAX;

impl PopulationParams {
    /// Zero probabilities from U[0.2, 0.6], Gamma shapes from U[0.5, 3],
    /// nonzero means from U[1, 20].
    pub fn draw(spec: &SimulationSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(PARAM_STREAM);
        let dc = spec.d_continuous;
        let continuous: Vec<ContinuousParams> = (0..dc)
            .map(|_| ContinuousParams {
                zero_prob: rng.random_range(0.2..0.6),
                shape: rng.random_range(0.5..3.0),
                mean: rng.random_range(1.0..20.0),
            })
            .collect();
        let binary = (0..spec.d_binary)
            .map(|_| BinaryParams {
                intercept: rng.random_range(-1.0..1.0),
                sources: [rng.random_range(0..dc), rng.random_range(0..dc)],
                slopes: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            })
            .collect();
        let d = spec.d();
        // centre the selection index near the typical transformed value
        let typical: Vec<f64> = continuous
            .iter()
            .map(|c| (1.0 - c.zero_prob) * (2.0 + c.mean).ln())
            .chain((0..spec.d_binary).map(|_| 0.5))
            .collect();
        let selection: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
        let shift: f64 = selection.iter().zip(&typical).map(|(s, t)| s * t).sum();
        let m = spec.n_outcomes;
        let latent = LatentParams {
            selection_intercept: -0.8 - shift,
            selection,
            selection_pair: rng.random_range(0.15..0.3),
            selection_step: rng.random_range(0.6..1.0),
            outcome_intercept: (0..m).map(|_| rng.random_range(8.0..12.0)).collect(),
            outcome: (0..m).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
            outcome_curvature: (0..m).map(|_| rng.random_range(0.1..0.3)).collect(),
            noise_sd: 1.0,
        };
        PopulationParams {
            continuous,
            binary,
            latent,
        }
    }
}

/// Covariate rows with the hidden treatment labels and outcomes that the
/// data-generating models are trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePopulation {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub outcomes: Vec<Vec<f64>>,
}

impl BasePopulation {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First and second halves.
    pub fn split_halves(mut self) -> (BasePopulation, BasePopulation) {
        let h = self.rows.len() / 2;
        let test = BasePopulation {
            rows: self.rows.split_off(h),
            labels: self.labels.split_off(h),
            outcomes: self.outcomes.split_off(h),
        };
        (self, test)
    }
}

fn draw_count(p: &ContinuousParams, rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<f64>() < p.zero_prob {
        return 0.0;
    }
    let rate = Gamma::new(p.shape, p.mean / p.shape).expect("positive gamma parameters").sample(rng);
    if rate <= 0.0 {
        return 1.0;
    }
    1.0 + Poisson::new(rate).expect("positive poisson rate").sample(rng)
}

/// `n` units from stream `stream` of the spec's seed.
pub fn generate_rows(spec: &SimulationSpec, params: &PopulationParams, n: usize, stream: u64) -> BasePopulation {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, params.latent.noise_sd).expect("finite noise sd");
    let lat = &params.latent;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f64> = params.continuous.iter().map(|c| draw_count(c, &mut rng)).collect();
        for b in &params.binary {
            let eta = b.intercept + b.slopes[0] * x[b.sources[0]].ln_1p() + b.slopes[1] * x[b.sources[1]].ln_1p();
            let p = 1.0 / (1.0 + (-eta).exp());
            x.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let dc = params.continuous.len();
        let u: Vec<f64> = x.iter().enumerate().map(|(j, v)| if j < dc { v.ln_1p() } else { *v }).collect();
        let u1 = u.get(1).copied().unwrap_or(0.0);
        let u2 = u.get(2).copied().unwrap_or(0.0);

        let eta = lat.selection_intercept
            + lat.selection.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
            + lat.selection_pair * u[0] * u1
            + if u2 > 1.5 { lat.selection_step } else { 0.0 };
        labels.push(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));

        let y: Vec<f64> = (0..lat.outcome.len())
            .map(|k| {
                lat.outcome_intercept[k]
                    + lat.outcome[k].iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                    + lat.outcome_curvature[k] * u[0] * u[0]
                    + noise.sample(&mut rng)
            })
            .collect();
        outcomes.push(y);
        rows.push(x);
    }
    BasePopulation { rows, labels, outcomes }
}

/// The spec's full base population (`n_units` rows, stream 0).
pub fn generate_base_population(spec: &SimulationSpec) -> BasePopulation {
    let params = PopulationParams::draw(spec);
    generate_rows(spec, &params, spec.n_units, 0)
}
