//! Shared Dirichlet-process machinery for the direct-assignment samplers.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Concentrations, Dirichlet base parameter and sweep schedule shared by the
/// activity and state samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdpHyperParams {
    /// Top-level concentration.
    pub gamma: f64,
    /// Per-group (clip or transition row) concentration.
    pub alpha: f64,
    /// Symmetric Dirichlet parameter of the word-distribution base measure.
    pub d0: f64,
    pub n_sweeps: usize,
    pub n_burnin: usize,
    pub seed: u64,
    /// Components the first sweep starts from, with data spread uniformly
    /// at random among them. Zero grows components one datum at a time.
    #[serde(default = "default_init_components")]
    pub init_components: usize,
    /// Independent chains; the best post-burn-in sample over all of them is kept.
    #[serde(default = "default_n_chains")]
    pub n_chains: usize,
}

fn default_init_components() -> usize {
    20
}

fn default_n_chains() -> usize {
    4
}

impl Default for HdpHyperParams {
    fn default() -> Self {
        HdpHyperParams { gamma: 2.0, alpha: 0.5, d0: 0.02, n_sweeps: 1000, n_burnin: 500, seed: 0, init_components: default_init_components(), n_chains: default_n_chains() }
    }
}

impl HdpHyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("d0", self.d0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be a positive finite number, got {v}")));
            }
        }
        if self.n_sweeps == 0 {
            return Err(Error::invalid("n_sweeps must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(Error::invalid("n_chains must be at least 1"));
        }
        if self.n_burnin >= self.n_sweeps {
            return Err(Error::invalid(format!(
                "n_burnin ({}) must be smaller than n_sweeps ({})",
                self.n_burnin, self.n_sweeps
            )));
        }
        Ok(())
    }
}

/// Random stream of one chain. Chains share the seed and differ by stream.
pub fn chain_rng(seed: u64, chain: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Log unsigned Stirling numbers of the first kind, `ln s(n, m)`, cached.
///
/// Rows are built with `s(n+1, m) = n s(n, m) + s(n, m-1)` and only the
/// columns up to the largest `m` requested so far are kept.
#[derive(Debug, Default)]
pub struct StirlingCache {
    rows: Vec<Vec<f64>>,
    m_cap: usize,
}

impl StirlingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ln_s(&mut self, n: usize, m: usize) -> f64 {
        if m > n {
            return f64::NEG_INFINITY;
        }
        if n == 0 {
            return 0.0;
        }
        if m == 0 {
            return f64::NEG_INFINITY;
        }
        if m == n {
            return 0.0;
        }
        if m > self.m_cap || n >= self.rows.len() {
            let m_cap = m.max(self.m_cap).max(8).next_power_of_two();
            let n_max = (n + 1).max(self.rows.len()).next_power_of_two();
            self.rebuild(n_max, m_cap);
        }
        self.rows[n][m]
    }

    fn rebuild(&mut self, n_rows: usize, m_cap: usize) {
        let mut rows = Vec::with_capacity(n_rows);
        let mut row = vec![f64::NEG_INFINITY; m_cap + 1];
        row[0] = 0.0;
        rows.push(row);
        for n in 0..n_rows - 1 {
            let prev = &rows[n];
            let ln_n = (n as f64).ln();
            let mut next = vec![f64::NEG_INFINITY; m_cap + 1];
            for m in 1..=m_cap.min(n + 1) {
                next[m] = log_add(ln_n + prev[m], prev[m - 1]);
            }
            rows.push(next);
        }
        self.rows = rows;
        self.m_cap = m_cap;
    }
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Number of tables occupied by `n` customers of one dish in a restaurant
/// with per-dish concentration `conc` (Antoniak distribution).
pub fn sample_table_count<R: Rng + ?Sized>(rng: &mut R, n: u32, conc: f64) -> u32 {
    let mut m = 0;
    for j in 0..n {
        if j == 0 || rng.random::<f64>() < conc / (conc + j as f64) {
            m += 1;
        }
    }
    m
}

/// Dirichlet draw by normalized gammas. Zero parameters yield zero weights.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, params: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> = params
        .iter()
        .map(|&a| if a > 0.0 { Gamma::new(a, 1.0).unwrap().sample(rng) } else { 0.0 })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // All gammas underflowed; fall back to the mean.
        let s: f64 = params.iter().sum();
        draws = params.iter().map(|a| a / s).collect();
    }
    draws
}

/// Break a new stick off the unrepresented mass: returns `(new_weight, rest)`.
pub fn break_stick<R: Rng + ?Sized>(rng: &mut R, rest: f64, gamma: f64) -> (f64, f64) {
    let b = Beta::new(1.0, gamma).unwrap().sample(rng);
    (b * rest, (1.0 - b) * rest)
}

/// Seating statistics of one restaurant: per-dish customers and tables.
pub struct Restaurant<'a> {
    pub customers: &'a [u32],
    pub tables: &'a [u32],
}

/// Log probability of a Chinese restaurant franchise configuration with the
/// table identities summed out.
///
/// Each restaurant contributes `ln G(a) - ln G(a + n) + sum_k [ln s(n_k, m_k) + m_k ln a]`
/// and the top level contributes `K ln g + ln G(g) - ln G(g + m) + sum_k ln G(m_k)`.
pub fn crf_log_prob<'a>(
    restaurants: impl IntoIterator<Item = Restaurant<'a>>,
    n_dishes: usize,
    alpha: f64,
    gamma: f64,
    stirling: &mut StirlingCache,
) -> Result<f64> {
    let mut dish_tables = vec![0u64; n_dishes];
    let ln_alpha = alpha.ln();
    let lg_alpha = ln_gamma(alpha);
    let mut lp = 0.0;
    for r in restaurants {
        if r.customers.len() > n_dishes || r.tables.len() > n_dishes || r.customers.len() != r.tables.len() {
            return Err(Error::invalid("restaurant statistics do not match the dish count"));
        }
        let n: u64 = r.customers.iter().map(|&c| c as u64).sum();
        if n == 0 {
            continue;
        }
        lp += lg_alpha - ln_gamma(alpha + n as f64);
        for (k, (&nk, &mk)) in r.customers.iter().zip(r.tables).enumerate() {
            if (nk == 0) != (mk == 0) || mk > nk {
                return Err(Error::invalid(format!("inconsistent table count {mk} for {nk} customers")));
            }
            if nk > 0 {
                lp += stirling.ln_s(nk as usize, mk as usize) + mk as f64 * ln_alpha;
                dish_tables[k] += mk as u64;
            }
        }
    }
    let total: u64 = dish_tables.iter().sum();
    let used = dish_tables.iter().filter(|&&m| m > 0).count();
    lp += used as f64 * gamma.ln() + ln_gamma(gamma) - ln_gamma(gamma + total as f64);
    lp += dish_tables.iter().filter(|&&m| m > 0).map(|&m| ln_gamma(m as f64)).sum::<f64>();
    Ok(lp)
}

/// Collapsed Dirichlet-multinomial log likelihood of one component's word
/// counts under a symmetric `Dir(d0)` prior over `vocab` words.
pub fn dirichlet_multinomial_ln(word_counts: &[u32], total: u64, vocab: usize, d0: f64) -> f64 {
    let vd = vocab as f64 * d0;
    let lg_d0 = ln_gamma(d0);
    let mut lp = ln_gamma(vd) - ln_gamma(total as f64 + vd);
    for &c in word_counts {
        if c > 0 {
            lp += ln_gamma(c as f64 + d0) - lg_d0;
        }
    }
    lp
}

/// `ln G(a + c) - ln G(a)` for a non-negative integer `c`.
#[inline]
pub(crate) fn ln_rising(a: f64, c: u32) -> f64 {
    match c {
        0 => 0.0,
        1 => a.ln(),
        2 => (a * (a + 1.0)).ln(),
        3 => (a * (a + 1.0) * (a + 2.0)).ln(),
        _ => ln_gamma(a + c as f64) - ln_gamma(a),
    }
}

/// How the typical prefix of the ranked components is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypicalRule {
    /// Keep component `j` while the accumulated ratio up to and including
    /// it stays at or below the cutoff.
    AtMost,
    /// Keep component `j` while the components ranked above it explain
    /// less than the cutoff.
    #[default]
    Covering,
}

/// Cutoff and rule for typical-component selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TypicalSelection {
    pub cutoff: f64,
    #[serde(default)]
    pub rule: TypicalRule,
}

impl Default for TypicalSelection {
    fn default() -> Self {
        TypicalSelection { cutoff: 0.99, rule: TypicalRule::Covering }
    }
}

impl TypicalSelection {
    pub fn new(cutoff: f64, rule: TypicalRule) -> Self {
        TypicalSelection { cutoff, rule }
    }

    pub fn select(&self, counts: &[f64]) -> Result<Vec<usize>> {
        select_typical_with(counts, self.cutoff, self.rule)
    }
}

/// Select the typical components from per-component counts.
///
/// Components are ranked by descending occurrence ratio (ties by ascending
/// id) and kept while the accumulated ratio stays at or below `cutoff`. The
/// top-ranked component is always kept. Equality is decided with a 1e-9
/// tolerance so that exact decimal boundaries are included.
pub fn select_typical(counts: &[f64], cutoff: f64) -> Result<Vec<usize>> {
    select_typical_with(counts, cutoff, TypicalRule::AtMost)
}

pub fn select_typical_with(counts: &[f64], cutoff: f64, rule: TypicalRule) -> Result<Vec<usize>> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::invalid(format!("cutoff must lie in (0, 1], got {cutoff}")));
    }
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::invalid("counts must be finite and non-negative"));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("at least one count must be positive"));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].total_cmp(&counts[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (rank, &k) in order.iter().enumerate() {
        let before = acc;
        acc += counts[k] / total;
        let keep = match rule {
            TypicalRule::AtMost => acc <= cutoff + 1e-9,
            TypicalRule::Covering => before < cutoff - 1e-9,
        };
        if rank == 0 || keep {
            out.push(k);
        } else {
            break;
        }
    }
    Ok(out)
}
