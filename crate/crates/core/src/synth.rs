//! Synthetic trade tapes with fully known ground truth: long-memory signed
//! order flow built from heavy-tailed metaorder splitting, volumes drawn
//! from the mean-one scaled law, and quotes driven by a transient-impact
//! kernel, so every estimator and the inversion pipeline can be validated by
//! round-trip recovery.
//!
//! Everything is a pure function of the manifest; randomness comes from
//! independent ChaCha20 streams derived from the manifest seed (the stream
//! split keeps e.g. volume draws unchanged when the kernel is modified).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tape::{build_tape, write_processed_file, FirmId, QuoteMode, Sign, Tape, Trade, TradeRecord};

/// Parameters of the power kernel `G0(l) = gamma0 / (l0^2 + l^2)^(beta/2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelParams {
    pub gamma0: f64,
    pub l0: f64,
    pub beta: f64,
}

impl KernelParams {
    pub fn value(&self, l: usize) -> f64 {
        self.gamma0 / (self.l0 * self.l0 + (l * l) as f64).powf(self.beta / 2.0)
    }
}

/// Anchor point for deriving impact coefficients: all firms share the
/// impact `delta0` (bps of spread) at volume `v0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstraintAnchor {
    pub v0: f64,
    pub delta0: f64,
}

/// Per-firm ground-truth parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmSpec {
    pub id: u32,
    /// Activity weight; weights sum to one over the manifest.
    pub weight: f64,
    /// Impact exponent.
    pub alpha: f64,
    /// Impact coefficient; derived from the constraint anchor when absent.
    #[serde(default)]
    pub c: Option<f64>,
    /// Mean order volume in currency units.
    pub mean_volume: f64,
    /// Metaorder-length tail exponent `a`; lengths follow
    /// `P(L >= n) = n^-a`, which targets a sign-correlation exponent near
    /// `a - 1`. Absent means unit-length metaorders (no long memory).
    #[serde(default)]
    pub meta_tail: Option<f64>,
    /// Lognormal scale of the multiplicative impact noise; overrides the
    /// manifest-wide value.
    #[serde(default)]
    pub impact_noise: Option<f64>,
    /// Per-firm kernel override (liquidity-timing strategies).
    #[serde(default)]
    pub kernel: Option<KernelParams>,
}

fn default_share_price() -> f64 {
    17.25
}

fn default_kernel_truncation() -> usize {
    512
}

/// Ground-truth description of a generated tape. Persisted alongside the
/// tape for round-trip tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifest {
    pub stock_label: String,
    pub n_trades: usize,
    pub seed: u64,
    /// Average log spread; the impact unit is `mean_spread / 100`.
    pub mean_spread: f64,
    /// Tail exponent of the scaled volume law (> 2).
    pub volume_gamma: f64,
    /// Per-tick additive quote noise scale (log units).
    pub noise_scale: f64,
    /// Manifest-wide lognormal scale of the multiplicative impact noise.
    #[serde(default)]
    pub impact_noise: f64,
    /// Reference price per share; volumes are quantized to whole shares at
    /// this price.
    #[serde(default = "default_share_price")]
    pub share_price: f64,
    /// Price tick for quote rounding; zero disables rounding.
    #[serde(default)]
    pub tick_size: f64,
    /// Market-wide bare impact kernel.
    pub kernel: KernelParams,
    /// Lag beyond which the generator holds the kernel at its last value.
    #[serde(default = "default_kernel_truncation")]
    pub kernel_truncation: usize,
    /// When set, propagated impact uses this volume exponent instead of the
    /// firm's own (injects a volume-dependent kernel, breaking response
    /// factorization).
    #[serde(default)]
    pub propagated_alpha: Option<f64>,
    #[serde(default)]
    pub constraint: Option<ConstraintAnchor>,
    pub firms: Vec<FirmSpec>,
}

impl SyntheticManifest {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CoreError::Config(format!("manifest: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(format!("manifest serialize: {e}")))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)
            .map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    /// Validate and fill derived fields (impact coefficients from the
    /// constraint anchor, per-firm noise defaults).
    pub fn resolved(mut self) -> Result<Self> {
        if self.n_trades == 0 {
            return Err(CoreError::Config("n_trades must be positive".into()));
        }
        if self.firms.is_empty() {
            return Err(CoreError::Config("manifest needs at least one firm".into()));
        }
        if !(self.mean_spread > 0.0) {
            return Err(CoreError::Config("mean_spread must be positive".into()));
        }
        if !(self.volume_gamma > 2.0) {
            return Err(CoreError::Config(format!(
                "volume_gamma must exceed 2, got {}",
                self.volume_gamma
            )));
        }
        if self.noise_scale < 0.0 || self.impact_noise < 0.0 {
            return Err(CoreError::Config("noise scales must be non-negative".into()));
        }
        if !(self.share_price > 0.0) {
            return Err(CoreError::Config("share_price must be positive".into()));
        }
        if self.tick_size < 0.0 {
            return Err(CoreError::Config("tick_size must be non-negative".into()));
        }
        if self.kernel_truncation < 2 {
            return Err(CoreError::Config("kernel_truncation must be at least 2".into()));
        }
        let wsum: f64 = self.firms.iter().map(|f| f.weight).sum();
        if (wsum - 1.0).abs() > 1e-6 {
            return Err(CoreError::Config(format!(
                "firm weights must sum to 1, got {wsum}"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &mut self.firms {
            if !seen.insert(f.id) {
                return Err(CoreError::Config(format!("duplicate firm id {}", f.id)));
            }
            if !(f.weight > 0.0) {
                return Err(CoreError::Config(format!("firm {} weight must be positive", f.id)));
            }
            if !(f.mean_volume > 0.0) {
                return Err(CoreError::Config(format!(
                    "firm {} mean_volume must be positive",
                    f.id
                )));
            }
            if let Some(a) = f.meta_tail {
                if !(a > 1.0 && a < 2.0) {
                    return Err(CoreError::Config(format!(
                        "firm {} meta_tail {a} must lie in (1, 2) to target a long-memory \
                         exponent in (0, 1)",
                        f.id
                    )));
                }
            }
            if f.c.is_none() {
                match &self.constraint {
                    Some(anchor) => {
                        f.c = Some(anchor.delta0 / anchor.v0.powf(f.alpha));
                    }
                    None => {
                        return Err(CoreError::Config(format!(
                            "firm {} has no impact coefficient and no constraint anchor is set",
                            f.id
                        )));
                    }
                }
            }
            if f.impact_noise.is_none() {
                f.impact_noise = Some(self.impact_noise);
            }
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Inverse-CDF draw of the mean-one scaled volume law for a uniform
/// `u in (0, 1]`: `x = (gamma-2) (u^(-1/(gamma-1)) - 1)`.
pub fn scaled_volume_from_uniform(u: f64, gamma: f64) -> f64 {
    (gamma - 2.0) * (u.powf(-1.0 / (gamma - 1.0)) - 1.0)
}

/// Analytic CDF of the scaled volume law,
/// `F(x) = 1 - ((gamma-2)/(gamma-2+x))^(gamma-1)`.
pub fn scaled_volume_cdf(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let b = gamma - 2.0;
    1.0 - (b / (b + x)).powf(gamma - 1.0)
}

fn draw_scaled_volume(rng: &mut ChaCha20Rng, gamma: f64) -> f64 {
    // 1 - [0,1) lands in (0,1], keeping the inverse CDF finite.
    let u = 1.0 - rng.random::<f64>();
    scaled_volume_from_uniform(u, gamma)
}

/// Draw a batch of scaled volumes (mean-one law) under a dedicated stream
/// of the given seed.
pub fn sample_scaled_volumes(n: usize, gamma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(gamma > 2.0) {
        return Err(CoreError::Config(format!(
            "volume gamma must exceed 2, got {gamma}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_VOLUMES);
    Ok((0..n).map(|_| draw_scaled_volume(&mut rng, gamma)).collect())
}

/// Metaorder length with tail `P(L >= n) = n^-a` for `n >= 1`.
fn draw_metaorder_length(rng: &mut ChaCha20Rng, tail: f64, cap: usize) -> usize {
    let u = 1.0 - rng.random::<f64>();
    let x = u.powf(-1.0 / tail);
    let len = (x.ceil() as usize).saturating_sub(1).max(1);
    len.min(cap)
}

/// Nominal metaorder tail exponent targeting a sign-correlation decay
/// exponent `gamma`; the mapping is checked empirically on generated tapes.
pub fn meta_tail_for_gamma(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoreError::Config(format!(
            "long-memory exponent must lie in (0, 1), got {gamma}"
        )));
    }
    Ok(1.0 + gamma)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// RNG stream ids; distinct streams keep the draws of one component stable
// under changes to another.
const STREAM_SIGNS: u64 = 0;
const STREAM_VOLUMES: u64 = 1;
const STREAM_IMPACT_NOISE: u64 = 2;
const STREAM_QUOTE_NOISE: u64 = 3;
const STREAM_FRAGMENTS: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-tick (firm index, sign) from weighted metaorder splitting.
pub fn generate_signs(manifest: &SyntheticManifest) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut rng = stream_rng(manifest.seed, STREAM_SIGNS);
    let n = manifest.n_trades;
    let nf = manifest.firms.len();
    // Cumulative weights for firm selection.
    let mut cum = Vec::with_capacity(nf);
    let mut acc = 0.0;
    for f in &manifest.firms {
        acc += f.weight;
        cum.push(acc);
    }
    let last = cum.last_mut().expect("non-empty firms");
    *last = 1.0;

    struct MetaState {
        remaining: usize,
        sign: f64,
    }
    let mut state: Vec<MetaState> = manifest
        .firms
        .iter()
        .map(|_| MetaState {
            remaining: 0,
            sign: 1.0,
        })
        .collect();

    let mut firm_of = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>();
        let fi = cum.partition_point(|&c| c <= u).min(nf - 1);
        let st = &mut state[fi];
        if st.remaining == 0 {
            st.sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            st.remaining = match manifest.firms[fi].meta_tail {
                Some(a) => draw_metaorder_length(&mut rng, a, n),
                None => 1,
            };
        }
        st.remaining -= 1;
        firm_of.push(fi);
        signs.push(st.sign);
    }
    Ok((firm_of, signs))
}

/// Volumes for an assigned firm sequence, quantized to whole shares at the
/// reference price (at least two shares, so raw-format emission can encode
/// the quote change across a fragment run).
pub fn generate_volumes(manifest: &SyntheticManifest, firm_of: &[usize]) -> (Vec<f64>, Vec<u64>) {
    let mut rng = stream_rng(manifest.seed, STREAM_VOLUMES);
    let price = manifest.share_price;
    let mut volumes = Vec::with_capacity(firm_of.len());
    let mut shares = Vec::with_capacity(firm_of.len());
    for &fi in firm_of {
        let x = draw_scaled_volume(&mut rng, manifest.volume_gamma);
        let raw = manifest.firms[fi].mean_volume * x;
        let s = ((raw / price).round() as u64).max(2);
        shares.push(s);
        volumes.push(s as f64 * price);
    }
    (volumes, shares)
}

/// Quote path from the transient-impact model.
///
/// The quote before trade `t` carries every earlier trade's propagated
/// impact (own-firm kernel, held at its truncation value beyond the window)
/// plus accumulated noise; the quote after adds the trade's own
/// instantaneous impact with unit weight.
fn build_quotes(
    firm_of: &[usize],
    signs: &[f64],
    inst_impact: &[f64],
    prop_impact: &[f64],
    kernels: &[Vec<f64>],
    noise_scale: f64,
    rng: &mut ChaCha20Rng,
) -> (Vec<f64>, Vec<f64>) {
    let n = signs.len();
    let window = kernels[0].len() - 1; // kernels[f][m] for m = 1..=window
    let normal = Normal::new(0.0, noise_scale.max(f64::MIN_POSITIVE)).expect("valid scale");
    let mut q_before = Vec::with_capacity(n);
    let mut q_after = Vec::with_capacity(n);
    let mut signed_prop: Vec<f64> = Vec::with_capacity(n);
    let mut noise_cum = 0.0;
    let mut held_total = 0.0;
    for t in 0..n {
        if t > window {
            let idx = t - window - 1;
            held_total += kernels[firm_of[idx]][window] * signed_prop[idx];
        }
        let mut q = held_total + noise_cum;
        let m_hi = window.min(t);
        for m in 1..=m_hi {
            q += kernels[firm_of[t - m]][m] * signed_prop[t - m];
        }
        let qb = q;
        let qa = qb + signs[t] * inst_impact[t];
        q_before.push(qb);
        q_after.push(qa);
        signed_prop.push(signs[t] * prop_impact[t]);
        if noise_scale > 0.0 {
            noise_cum += normal.sample(rng);
        }
    }
    (q_before, q_after)
}

/// A generated tape together with the resolved manifest describing it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub tape: Tape,
    pub manifest: SyntheticManifest,
}

/// Generate the full tape for a manifest. Deterministic in the manifest.
pub fn generate(manifest: &SyntheticManifest) -> Result<SynthOutput> {
    let manifest = manifest.clone().resolved()?;
    let (firm_of, signs) = generate_signs(&manifest)?;
    let (volumes, _shares) = generate_volumes(&manifest, &firm_of);

    let sigma = manifest.mean_spread / 100.0;
    let mut impact_rng = stream_rng(manifest.seed, STREAM_IMPACT_NOISE);
    let n = manifest.n_trades;
    let mut inst = Vec::with_capacity(n);
    let mut prop = Vec::with_capacity(n);
    for t in 0..n {
        let f = &manifest.firms[firm_of[t]];
        let c = f.c.expect("resolved");
        let sm = f.impact_noise.expect("resolved");
        let xi = if sm > 0.0 {
            let z: f64 = impact_rng.sample(rand_distr::StandardNormal);
            (sm * z - sm * sm / 2.0).exp()
        } else {
            1.0
        };
        let i_inst = sigma * c * volumes[t].powf(f.alpha) * xi;
        let i_prop = match manifest.propagated_alpha {
            Some(ap) => sigma * c * volumes[t].powf(ap) * xi,
            None => i_inst,
        };
        inst.push(i_inst);
        prop.push(i_prop);
    }

    let window = manifest.kernel_truncation;
    let kernels: Vec<Vec<f64>> = manifest
        .firms
        .iter()
        .map(|f| {
            let params = f.kernel.unwrap_or(manifest.kernel);
            let mut table = vec![0.0; window + 1];
            for (m, slot) in table.iter_mut().enumerate().skip(1) {
                *slot = params.value(m);
            }
            table
        })
        .collect();

    let mut noise_rng = stream_rng(manifest.seed, STREAM_QUOTE_NOISE);
    let (mut q_before, mut q_after) = build_quotes(
        &firm_of,
        &signs,
        &inst,
        &prop,
        &kernels,
        manifest.noise_scale,
        &mut noise_rng,
    );

    if manifest.tick_size > 0.0 {
        let grid = manifest.tick_size / manifest.share_price;
        let snap = |q: f64| (q / grid).round() * grid;
        for q in q_before.iter_mut() {
            *q = snap(*q);
        }
        for q in q_after.iter_mut() {
            *q = snap(*q);
        }
    }

    let trades: Vec<Trade> = (0..n)
        .map(|t| Trade {
            tick: t,
            trigger: FirmId(manifest.firms[firm_of[t]].id),
            sign: if signs[t] > 0.0 { Sign::Buy } else { Sign::Sell },
            volume: volumes[t],
            quote_before: q_before[t],
            quote_after: q_after[t],
        })
        .collect();

    let tape = build_tape(trades, manifest.stock_label.clone(), manifest.mean_spread)?;
    Ok(SynthOutput { tape, manifest })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EmitPaths {
    pub tape: PathBuf,
    pub manifest: PathBuf,
    pub raw: Option<PathBuf>,
}

/// Write the canonical processed tape and the resolved manifest (and the
/// raw-format file when requested) into `dir`.
pub fn emit_tape(manifest: &SyntheticManifest, dir: &Path, emit_raw: bool) -> Result<(SynthOutput, EmitPaths)> {
    let out = generate(manifest)?;
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let tape_path = dir.join("tape.csv");
    write_processed_file(&tape_path, out.tape.trades())?;
    let manifest_path = dir.join("manifest.toml");
    out.manifest.write_file(&manifest_path)?;
    let raw = if emit_raw {
        let raw_path = dir.join("raw.csv");
        write_raw_fragments(&out, &raw_path)?;
        Some(raw_path)
    } else {
        None
    };
    Ok((
        out,
        EmitPaths {
            tape: tape_path,
            manifest: manifest_path,
            raw,
        },
    ))
}

/// Split trades into same-second fragment records, exercising the raw
/// aggregation procedure: a trade's shares are spread over several
/// counterparties within one second, the first fragment carrying the
/// before-quote and the last the after-quote. Larger trades shatter into
/// more fragments. Quotes are written in log units with half the mean
/// spread on each side of the mid.
pub fn write_raw_fragments(out: &SynthOutput, path: &Path) -> Result<()> {
    let mut rng = stream_rng(out.manifest.seed, STREAM_FRAGMENTS);
    let price = out.manifest.share_price;
    let half_spread = out.manifest.mean_spread / 2.0;
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    writeln!(w, "second,buyer_id,seller_id,sign,shares,price,bid_quote,ask_quote")
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut write_row = |second: usize, rec: &TradeRecord| -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            second,
            rec.buyer,
            rec.seller,
            rec.sign.as_int(),
            rec.shares,
            rec.price,
            rec.bid_quote,
            rec.ask_quote
        )
    };
    for t in out.tape.trades() {
        let shares = (t.volume / price).round() as u64;
        // Counterparty count grows slowly with order size.
        let n_frag = ((shares as f64).powf(0.15) as u64).clamp(2, 12).min(shares).max(1);
        let base = shares / n_frag;
        let rem = shares % n_frag;
        for k in 0..n_frag {
            let frag_shares = base + if k < rem { 1 } else { 0 };
            if frag_shares == 0 {
                continue;
            }
            let counterparty = FirmId(9000 + rng.random_range(0..50u32));
            let (buyer, seller) = match t.sign {
                Sign::Buy => (t.trigger, counterparty),
                Sign::Sell => (counterparty, t.trigger),
            };
            let q = if k == 0 { t.quote_before } else { t.quote_after };
            let rec = TradeRecord {
                second: t.tick as i64,
                buyer,
                seller,
                sign: t.sign,
                shares: frag_shares,
                price,
                bid_quote: q - half_spread,
                ask_quote: q + half_spread,
            };
            write_row(t.tick, &rec).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Quote mode of the raw files this generator emits.
pub const RAW_QUOTE_MODE: QuoteMode = QuoteMode::LogMid;
