use serde::{Deserialize, Serialize};

use super::{BlockLabel, Dataset};
use crate::error::{FsrmError, Result};
use crate::numcore::{
    mvn_sample, random_correlation_covariance, std_normal_cdf, Matrix, RandomStream,
};

/// Upper bound on candidate batches while filling the pool quotas.
const MAX_POOL_ROUNDS: usize = 10_000;

/// Parameters of the partially linear benchmark
/// `Y = τ(C, A)·T + g(C, A) + ε`, `T ~ Bernoulli(e0(C, Z))`.
///
/// Columns are laid out as `C | A | Z | I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_confounders: usize,
    pub n_adjustment: usize,
    pub n_instruments: usize,
    pub n_irrelevant: usize,
    /// Effect weights over `(C, A)`.
    pub b_tau: Vec<f64>,
    /// Baseline weights over `(C, A)`.
    pub b_g: Vec<f64>,
    /// Propensity weights over `(C, Z)`.
    pub b_a: Vec<f64>,
    pub noise_std: f64,
    pub pool_treated: usize,
    pub pool_control: usize,
    pub draw_treated: usize,
    pub draw_control: usize,
}

impl SyntheticSpec {
    /// Block sizes as given, every weight drawn from uniform(0, 1), all other
    /// settings at their defaults.
    pub fn with_sizes(
        n_confounders: usize,
        n_adjustment: usize,
        n_instruments: usize,
        n_irrelevant: usize,
        stream: &mut RandomStream,
    ) -> Self {
        let ca = n_confounders + n_adjustment;
        let cz = n_confounders + n_instruments;
        let mut draw = |k: usize| (0..k).map(|_| stream.uniform()).collect::<Vec<_>>();
        let b_tau = draw(ca);
        let b_g = draw(ca);
        let b_a = draw(cz);
        SyntheticSpec {
            n_confounders,
            n_adjustment,
            n_instruments,
            n_irrelevant,
            b_tau,
            b_g,
            b_a,
            noise_std: 1.0,
            pool_treated: 1000,
            pool_control: 1000,
            draw_treated: 250,
            draw_control: 750,
        }
    }

    /// 15 confounders, 15 adjustment, 10 instruments, 20 irrelevant.
    pub fn standard(stream: &mut RandomStream) -> Self {
        SyntheticSpec::with_sizes(15, 15, 10, 20, stream)
    }

    pub fn dim(&self) -> usize {
        self.n_confounders + self.n_adjustment + self.n_instruments + self.n_irrelevant
    }

    pub fn block_labels(&self) -> Vec<BlockLabel> {
        let mut labels = Vec::with_capacity(self.dim());
        labels.extend(std::iter::repeat_n(BlockLabel::Confounder, self.n_confounders));
        labels.extend(std::iter::repeat_n(BlockLabel::Adjustment, self.n_adjustment));
        labels.extend(std::iter::repeat_n(BlockLabel::Instrument, self.n_instruments));
        labels.extend(std::iter::repeat_n(BlockLabel::Irrelevant, self.n_irrelevant));
        labels
    }

    pub fn validate(&self) -> Result<()> {
        let ca = self.n_confounders + self.n_adjustment;
        let cz = self.n_confounders + self.n_instruments;
        if self.b_tau.len() != ca || self.b_g.len() != ca {
            return Err(FsrmError::invalid(format!(
                "b_tau/b_g must have {ca} entries, got {}/{}",
                self.b_tau.len(),
                self.b_g.len()
            )));
        }
        if self.b_a.len() != cz {
            return Err(FsrmError::invalid(format!(
                "b_a must have {cz} entries, got {}",
                self.b_a.len()
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(FsrmError::invalid(format!(
                "noise_std = {} must be >= 0",
                self.noise_std
            )));
        }
        if self.dim() == 0 {
            return Err(FsrmError::invalid("synthetic spec has no covariates"));
        }
        Ok(())
    }
}

struct Candidates {
    x: Matrix,
    tau: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
}

fn dot_blocks(
    row: &[f64],
    first: std::ops::Range<usize>,
    second: std::ops::Range<usize>,
    w: &[f64],
) -> f64 {
    row[first]
        .iter()
        .chain(&row[second])
        .zip(w)
        .map(|(x, b)| x * b)
        .sum()
}

fn draw_candidates(
    spec: &SyntheticSpec,
    covs: &[Option<Matrix>; 4],
    n: usize,
    stream: &mut RandomStream,
) -> Result<Candidates> {
    let mut x = Matrix::zeros(n, 0);
    for cov in covs.iter().flatten() {
        x = x.hstack(&mvn_sample(n, cov, stream)?)?;
    }
    let c = 0..spec.n_confounders;
    let a_blk = spec.n_confounders..spec.n_confounders + spec.n_adjustment;
    let z_start = a_blk.end;
    let z = z_start..z_start + spec.n_instruments;
    let mut out = Candidates {
        x,
        tau: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
    };
    for i in 0..n {
        let row = out.x.row(i);
        let s_tau = dot_blocks(row, c.clone(), a_blk.clone(), &spec.b_tau).sin();
        let c_g = dot_blocks(row, c.clone(), a_blk.clone(), &spec.b_g).cos();
        out.tau.push(s_tau * s_tau);
        out.g.push(c_g * c_g);
        out.a
            .push(dot_blocks(row, c.clone(), z.clone(), &spec.b_a).sin());
    }
    Ok(out)
}

/// Fills a pool of `pool_treated` treated and `pool_control` control units.
///
/// Candidates are drawn in batches of `pool_treated + pool_control`; the
/// propensity index is standardized with the first batch's mean and standard
/// deviation, then each candidate is Bernoulli-assigned and kept while its
/// group quota is open.
pub fn generate_pool(spec: &SyntheticSpec, stream: &mut RandomStream) -> Result<Dataset> {
    spec.validate()?;
    let sizes = [
        spec.n_confounders,
        spec.n_adjustment,
        spec.n_instruments,
        spec.n_irrelevant,
    ];
    let mut covs: [Option<Matrix>; 4] = Default::default();
    for (slot, &k) in covs.iter_mut().zip(&sizes) {
        if k > 0 {
            *slot = Some(random_correlation_covariance(k, stream)?);
        }
    }

    let total = spec.pool_treated + spec.pool_control;
    let d = spec.dim();
    let mut x = Vec::with_capacity(total * d);
    let (mut t, mut y_f, mut y_cf, mut mu0, mut mu1, mut e0) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
    );
    let (mut need_t, mut need_c) = (spec.pool_treated, spec.pool_control);
    let mut standardization: Option<(f64, f64)> = None;
    let mut rounds = 0;

    while need_t + need_c > 0 {
        rounds += 1;
        if rounds > MAX_POOL_ROUNDS {
            return Err(FsrmError::Generation(format!(
                "pool not filled after {MAX_POOL_ROUNDS} rounds ({need_t} treated, {need_c} control missing)"
            )));
        }
        let batch = draw_candidates(spec, &covs, total, stream)?;
        let (mean_a, sd_a) = *match &mut standardization {
            Some(s) => s,
            slot => {
                let n = batch.a.len() as f64;
                let mean = batch.a.iter().sum::<f64>() / n;
                let sd = (batch.a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if !(sd > 1e-12) {
                    return Err(FsrmError::Generation(format!(
                        "singular propensity index: stddev(a) = {sd:e}"
                    )));
                }
                slot.insert((mean, sd))
            }
        };
        for i in 0..total {
            let p = std_normal_cdf((batch.a[i] - mean_a) / sd_a)?
                .clamp(f64::EPSILON, 1.0 - f64::EPSILON);
            let treated = stream.bernoulli(p);
            let eps = spec.noise_std * stream.standard_normal();
            let open = if treated { &mut need_t } else { &mut need_c };
            if *open == 0 {
                continue;
            }
            *open -= 1;
            let (g, tau) = (batch.g[i], batch.tau[i]);
            x.extend_from_slice(batch.x.row(i));
            t.push(treated);
            mu0.push(g);
            mu1.push(g + tau);
            if treated {
                y_f.push(g + tau + eps);
                y_cf.push(g + eps);
            } else {
                y_f.push(g + eps);
                y_cf.push(g + tau + eps);
            }
            e0.push(p);
        }
    }

    let n = t.len();
    let ds = Dataset {
        x: Matrix::from_vec(n, d, x)?,
        t,
        y_f,
        y_cf: Some(y_cf),
        mu0: Some(mu0),
        mu1: Some(mu1),
        e0: Some(e0),
        block_labels: Some(spec.block_labels()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Pool followed by an unbiased draw of `draw_treated` + `draw_control` units.
pub fn generate_synthetic(spec: &SyntheticSpec, stream: &mut RandomStream) -> Result<Dataset> {
    let pool = generate_pool(spec, stream)?;
    biased_resample(&pool, 0.0, spec.draw_treated, spec.draw_control, stream)
}

fn draw_group(
    group: &[usize],
    extremity: &[f64],
    q: f64,
    k: usize,
    stream: &mut RandomStream,
) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..group.len()).collect();
    ranked.sort_by(|&a, &b| {
        extremity[group[b]]
            .total_cmp(&extremity[group[a]])
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; group.len()];
    let mut remaining: Vec<usize> = (0..group.len()).collect();
    let mut next_greedy = 0;
    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k {
        let pos = if stream.bernoulli(q) {
            while taken[ranked[next_greedy]] {
                next_greedy += 1;
            }
            ranked[next_greedy]
        } else {
            loop {
                let slot = stream.below(remaining.len());
                let cand = remaining.swap_remove(slot);
                if !taken[cand] {
                    break cand;
                }
            }
        };
        taken[pos] = true;
        drawn.push(group[pos]);
    }
    drawn
}

/// Draws from each treatment group; every draw is, with probability `q`, the
/// remaining unit with the largest `|e0 - 0.5|` and otherwise uniform over the
/// remaining units. The result keeps pool order.
pub fn biased_resample(
    pool: &Dataset,
    q: f64,
    draw_treated: usize,
    draw_control: usize,
    stream: &mut RandomStream,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&q) {
        return Err(FsrmError::invalid(format!("q = {q} outside [0, 1]")));
    }
    let e0 = pool
        .e0
        .as_ref()
        .ok_or_else(|| FsrmError::invalid("biased_resample needs a pool with e0"))?;
    let treated = pool.treated_indices();
    let control = pool.control_indices();
    if draw_treated > treated.len() || draw_control > control.len() {
        return Err(FsrmError::invalid(format!(
            "cannot draw {draw_treated}/{draw_control} from groups of {}/{}",
            treated.len(),
            control.len()
        )));
    }
    let extremity: Vec<f64> = e0.iter().map(|p| (p - 0.5).abs()).collect();
    let mut idx = draw_group(&treated, &extremity, q, draw_treated, stream);
    idx.extend(draw_group(&control, &extremity, q, draw_control, stream));
    idx.sort_unstable();
    Ok(pool.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(stream: &mut RandomStream) -> SyntheticSpec {
        let mut spec = SyntheticSpec::with_sizes(3, 2, 2, 2, stream);
        spec.pool_treated = 200;
        spec.pool_control = 300;
        spec.draw_treated = 50;
        spec.draw_control = 150;
        spec
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut all: Vec<f64> = a.iter().chain(&b).cloned().collect();
        all.sort_by(f64::total_cmp);
        all.iter()
            .map(|&v| {
                let fa = a.partition_point(|&x| x <= v) as f64 / a.len() as f64;
                let fb = b.partition_point(|&x| x <= v) as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn default_spec_shape() {
        let mut s = RandomStream::new(11);
        let spec = SyntheticSpec::standard(&mut s);
        let ds = generate_synthetic(&spec, &mut s).unwrap();
        assert_eq!(ds.d(), 60);
        assert_eq!(ds.n(), 1000);
        assert_eq!(ds.n_treated(), 250);
        assert_eq!(
            ds.columns_with(BlockLabel::Confounder),
            (0..15).collect::<Vec<_>>()
        );
        assert_eq!(
            ds.columns_with(BlockLabel::Irrelevant),
            (40..60).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_effect_weights_give_zero_ite() {
        let mut s = RandomStream::new(2);
        let mut spec = small_spec(&mut s);
        spec.b_tau.iter_mut().for_each(|b| *b = 0.0);
        let ds = generate_synthetic(&spec, &mut s).unwrap();
        assert!(ds.true_ite().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_propensities_are_consistent() {
        let mut s = RandomStream::new(3);
        let spec = SyntheticSpec::standard(&mut s);
        let pool = generate_pool(&spec, &mut s).unwrap();
        let e0 = pool.e0.as_ref().unwrap();
        assert!(e0.iter().all(|&p| p > 0.0 && p < 1.0));
        let mean = e0.iter().sum::<f64>() / e0.len() as f64;
        let frac = pool.n_treated() as f64 / pool.n() as f64;
        assert!(
            (mean - frac).abs() < 0.1,
            "mean e0 {mean} vs treated fraction {frac}"
        );
        assert_eq!(pool.n_treated(), 1000);
        assert_eq!(pool.n(), 2000);
    }

    #[test]
    fn residual_noise_matches_noise_std() {
        let mut s = RandomStream::new(4);
        let mut spec = small_spec(&mut s);
        spec.pool_treated = 5000;
        spec.pool_control = 5000;
        spec.noise_std = 0.7;
        let pool = generate_pool(&spec, &mut s).unwrap();
        let mu0 = pool.mu0.as_ref().unwrap();
        let mu1 = pool.mu1.as_ref().unwrap();
        let resid: Vec<f64> = (0..pool.n())
            .map(|i| pool.y_f[i] - if pool.t[i] { mu1[i] } else { mu0[i] })
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.03);
        assert!((sd - 0.7).abs() < 0.07, "sd {sd}");
    }

    #[test]
    fn assignment_ignores_outcome_model() {
        let mut s = RandomStream::new(5);
        let spec = small_spec(&mut s);
        let mut other = spec.clone();
        other.b_tau.iter_mut().for_each(|b| *b *= 3.0);
        other.b_g.reverse();
        other.noise_std = 2.0;
        let a = generate_pool(&spec, &mut RandomStream::new(77)).unwrap();
        let b = generate_pool(&other, &mut RandomStream::new(77)).unwrap();
        assert_eq!(a.t, b.t);
        assert_eq!(a.x, b.x);
        assert_eq!(a.e0, b.e0);
    }

    #[test]
    fn degenerate_propensity_is_an_error() {
        let mut s = RandomStream::new(6);
        let mut spec = small_spec(&mut s);
        spec.b_a.iter_mut().for_each(|b| *b = 0.0);
        assert!(matches!(
            generate_pool(&spec, &mut s),
            Err(FsrmError::Generation(_))
        ));
    }

    #[test]
    fn full_bias_takes_the_most_extreme_units() {
        let mut s = RandomStream::new(7);
        let spec = small_spec(&mut s);
        let pool = generate_pool(&spec, &mut s).unwrap();
        let drawn = biased_resample(&pool, 1.0, 50, 150, &mut s).unwrap();
        assert_eq!(drawn.n_treated(), 50);
        let e0 = pool.e0.as_ref().unwrap();
        for (group, k) in [(pool.treated_indices(), 50), (pool.control_indices(), 150)] {
            let mut ext: Vec<f64> = group.iter().map(|&i| (e0[i] - 0.5).abs()).collect();
            ext.sort_by(|a, b| b.total_cmp(a));
            let treated = group.first().map(|&i| pool.t[i]).unwrap();
            let mut got: Vec<f64> = (0..drawn.n())
                .filter(|&i| drawn.t[i] == treated)
                .map(|i| (drawn.e0.as_ref().unwrap()[i] - 0.5).abs())
                .collect();
            got.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(got, ext[..k].to_vec());
        }
    }

    #[test]
    fn unbiased_draw_matches_pool_distribution() {
        let mut s = RandomStream::new(8);
        let spec = SyntheticSpec::standard(&mut s);
        let pool = generate_pool(&spec, &mut s).unwrap();
        let e0 = pool.e0.as_ref().unwrap();
        let pool_ext: Vec<f64> = pool
            .control_indices()
            .iter()
            .map(|&i| (e0[i] - 0.5).abs())
            .collect();
        let drawn = biased_resample(&pool, 0.0, 250, 750, &mut s).unwrap();
        let de0 = drawn.e0.as_ref().unwrap();
        let ext: Vec<f64> = drawn
            .control_indices()
            .iter()
            .map(|&i| (de0[i] - 0.5).abs())
            .collect();
        assert!(ks_statistic(&ext, &pool_ext) < 0.1);

        let other = biased_resample(&pool, 0.0, 250, 750, &mut RandomStream::new(99)).unwrap();
        let oe0 = other.e0.as_ref().unwrap();
        let ext2: Vec<f64> = other
            .control_indices()
            .iter()
            .map(|&i| (oe0[i] - 0.5).abs())
            .collect();
        assert!(ks_statistic(&ext, &ext2) < 0.1);
    }

    #[test]
    fn partial_bias_lies_between_extremes() {
        let mut s = RandomStream::new(9);
        let spec = small_spec(&mut s);
        let pool = generate_pool(&spec, &mut s).unwrap();
        let mean_ext = |q: f64, seed: u64| {
            let ds = biased_resample(&pool, q, 50, 150, &mut RandomStream::new(seed)).unwrap();
            let e0 = ds.e0.unwrap();
            e0.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / e0.len() as f64
        };
        let avg = |q: f64| (0..100).map(|seed| mean_ext(q, seed)).sum::<f64>() / 100.0;
        let (m0, mh, m1) = (avg(0.0), avg(0.5), avg(1.0));
        assert!(m0 < mh && mh < m1, "{m0} {mh} {m1}");
    }

    #[test]
    fn resample_errors() {
        let mut s = RandomStream::new(10);
        let spec = small_spec(&mut s);
        let mut pool = generate_pool(&spec, &mut s).unwrap();
        assert!(biased_resample(&pool, 0.0, 201, 10, &mut s).is_err());
        assert!(biased_resample(&pool, 1.5, 1, 1, &mut s).is_err());
        pool.e0 = None;
        assert!(biased_resample(&pool, 0.0, 1, 1, &mut s).is_err());
    }
}
