//! Toy differentiable vision-language policy `π_θ(A | Q, I)`.
//!
//! Question tokens are embedded and mean-pooled, the image is reduced to per-patch
//! means, and one `tanh` layer feeds a softmax over single-token answers:
//!
//! ```text
//! h = tanh(W_img f_I + W_q f_Q + b),   log π(·|Q,I) = log_softmax(U h + c)
//! ```

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{log_softmax, pairwise_sum};
use crate::error::{Error, Result};
use crate::imageops::{balanced_bounds, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_patches: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            embed_dim: 16,
            hidden: 32,
            n_patches: 16,
            question_vocab: 32,
            answer_vocab: 16,
        }
    }
}

/// Flat offsets of each parameter block.
#[derive(Debug, Clone)]
struct Layout {
    embed: Range<usize>,
    w_img: Range<usize>,
    w_q: Range<usize>,
    b: Range<usize>,
    u: Range<usize>,
    c: Range<usize>,
}

impl PolicyDims {
    pub fn param_count(&self) -> usize {
        self.layout().c.end
    }

    /// Side length of the square patch grid.
    pub fn patch_grid(&self) -> Result<usize> {
        let g = (self.n_patches as f64).sqrt().round() as usize;
        if g == 0 || g * g != self.n_patches {
            return Err(Error::Parameter(format!(
                "n_patches {} is not a positive perfect square",
                self.n_patches
            )));
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.embed_dim,
            self.hidden,
            self.question_vocab,
            self.answer_vocab,
        ]
        .contains(&0)
        {
            return Err(Error::Parameter(format!("zero-sized dimension in {self:?}")));
        }
        self.patch_grid().map(|_| ())
    }

    fn layout(&self) -> Layout {
        let PolicyDims {
            embed_dim: d,
            hidden: h,
            n_patches: p,
            question_vocab: qv,
            answer_vocab: av,
        } = *self;
        let mut at = 0;
        let mut block = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            embed: block(qv * d),
            w_img: block(h * p),
            w_q: block(h * d),
            b: block(h),
            u: block(av * h),
            c: block(av),
        }
    }
}

/// Nonempty question token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, question_vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Parameter("empty question".into()));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= question_vocab) {
            return Err(Error::Parameter(format!(
                "token {t} outside question vocabulary of {question_vocab}"
            )));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerId(pub usize);

/// Flat parameter vector plus its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Result<Self> {
        dims.validate()?;
        Ok(PolicyParams {
            dims,
            values: vec![0.0; dims.param_count()],
        })
    }

    pub fn from_flat(dims: PolicyDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(Error::Parameter(format!(
                "{} values for {} parameters",
                values.len(),
                dims.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite parameter at {i}")));
        }
        Ok(PolicyParams { dims, values })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Views the same dims over a different flat vector, e.g. a perturbed copy.
    pub fn view<'a>(&self, values: &'a [f64]) -> ParamsView<'a> {
        ParamsView {
            dims: self.dims,
            layout: self.dims.layout(),
            values,
        }
    }

    pub(crate) fn as_view(&self) -> ParamsView<'_> {
        self.view(&self.values)
    }

    /// Answer-logit rows `U[a]` and bias `c[a]` permuted by `perm` (row `i` ← row `perm[i]`).
    pub fn permute_answers(&self, perm: &[usize]) -> Result<PolicyParams> {
        let av = self.dims.answer_vocab;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..av).collect::<Vec<_>>() {
            return Err(Error::Parameter("not a permutation of the answer vocabulary".into()));
        }
        let lay = self.dims.layout();
        let h = self.dims.hidden;
        let mut out = self.clone();
        for (i, &src) in perm.iter().enumerate() {
            let (dst_u, src_u) = (lay.u.start + i * h, lay.u.start + src * h);
            out.values[dst_u..dst_u + h].copy_from_slice(&self.values[src_u..src_u + h]);
            out.values[lay.c.start + i] = self.values[lay.c.start + src];
        }
        Ok(out)
    }
}

/// Borrowed parameters, so objectives can be evaluated on perturbed flat vectors.
#[derive(Debug, Clone)]
pub struct ParamsView<'a> {
    dims: PolicyDims,
    layout: Layout,
    values: &'a [f64],
}

/// Seeded uniform initialization in `[-0.1, 0.1]`.
pub fn init_params(dims: PolicyDims, seed: u64) -> Result<PolicyParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..dims.param_count())
        .map(|_| rng.gen_range(-0.1..=0.1))
        .collect();
    Ok(PolicyParams { dims, values })
}

/// Deep copy used to freeze a reference policy.
pub fn clone_as_reference(params: &PolicyParams) -> PolicyParams {
    params.clone()
}

/// Per-tile means over a `patch_grid × patch_grid` partition, row-major.
pub fn image_features(img: &ImageGrid, patch_grid: usize) -> Result<Vec<f64>> {
    if patch_grid == 0 || img.width() < patch_grid || img.height() < patch_grid {
        return Err(Error::Parameter(format!(
            "{}x{} image is smaller than a {patch_grid}x{patch_grid} patch grid",
            img.width(),
            img.height()
        )));
    }
    let xb = balanced_bounds(img.width(), patch_grid);
    let yb = balanced_bounds(img.height(), patch_grid);
    let mut feats = Vec::with_capacity(patch_grid * patch_grid);
    for ty in yb.windows(2) {
        for tx in xb.windows(2) {
            let mut vals = Vec::with_capacity((tx[1] - tx[0]) * (ty[1] - ty[0]));
            for y in ty[0]..ty[1] {
                vals.extend_from_slice(&img.pixels()[y * img.width() + tx[0]..y * img.width() + tx[1]]);
            }
            feats.push(pairwise_sum(&vals) / vals.len() as f64);
        }
    }
    Ok(feats)
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub question_feature: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ParamsView<'_> {
    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_inputs(&self, q: &TokenSeq, features: &[f64]) -> Result<()> {
        if features.len() != self.dims.n_patches {
            return Err(Error::Parameter(format!(
                "{} image features for {} patches",
                features.len(),
                self.dims.n_patches
            )));
        }
        if let Some(t) = q.tokens().iter().find(|t| **t >= self.dims.question_vocab) {
            return Err(Error::Parameter(format!(
                "token {t} outside question vocabulary of {}",
                self.dims.question_vocab
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, q: &TokenSeq, features: &[f64]) -> Result<ForwardCache> {
        self.check_inputs(q, features)?;
        let PolicyDims {
            embed_dim: d,
            hidden: hd,
            n_patches: np,
            answer_vocab: av,
            ..
        } = self.dims;
        let v = self.values;
        let lay = &self.layout;

        let mut f_q = vec![0.0; d];
        for &t in q.tokens() {
            let row = &v[lay.embed.start + t * d..lay.embed.start + (t + 1) * d];
            for (acc, e) in f_q.iter_mut().zip(row) {
                *acc += e;
            }
        }
        let n = q.tokens().len() as f64;
        f_q.iter_mut().for_each(|x| *x /= n);

        let mut hidden = vec![0.0; hd];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let wi = &v[lay.w_img.start + j * np..lay.w_img.start + (j + 1) * np];
            let wq = &v[lay.w_q.start + j * d..lay.w_q.start + (j + 1) * d];
            let mut pre = v[lay.b.start + j];
            pre += wi.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
            pre += wq.iter().zip(&f_q).map(|(a, b)| a * b).sum::<f64>();
            *hj = pre.tanh();
        }

        let logits: Vec<f64> = (0..av)
            .map(|a| {
                let ua = &v[lay.u.start + a * hd..lay.u.start + (a + 1) * hd];
                v[lay.c.start + a] + ua.iter().zip(&hidden).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect();
        Ok(ForwardCache {
            question_feature: f_q,
            hidden,
            log_probs: log_softmax(&logits)?,
            logits,
        })
    }

    pub fn log_prob_features(&self, q: &TokenSeq, features: &[f64], a: AnswerId) -> Result<f64> {
        self.check_answer(a)?;
        Ok(self.forward_cached(q, features)?.log_probs[a.0])
    }

    /// `log π(a_w|·) − log π(a_l|·)`, taken as a logit difference so the
    /// normalizer cancels exactly.
    pub fn answer_contrast(&self, q: &TokenSeq, features: &[f64], a_w: AnswerId, a_l: AnswerId) -> Result<f64> {
        self.check_answer(a_w)?;
        self.check_answer(a_l)?;
        let cache = self.forward_cached(q, features)?;
        Ok(cache.logits[a_w.0] - cache.logits[a_l.0])
    }

    fn check_answer(&self, a: AnswerId) -> Result<()> {
        if a.0 >= self.dims.answer_vocab {
            return Err(Error::Parameter(format!(
                "answer {} outside vocabulary of {}",
                a.0, self.dims.answer_vocab
            )));
        }
        Ok(())
    }

    /// Adds `scale · ∇ log π(a | q, features)` into `out`; returns `log π(a | q, features)`.
    pub fn accumulate_log_prob_grad(
        &self,
        q: &TokenSeq,
        features: &[f64],
        a: AnswerId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        self.check_answer(a)?;
        if out.len() != self.values.len() {
            return Err(Error::Parameter("gradient buffer has the wrong length".into()));
        }
        let cache = self.forward_cached(q, features)?;
        let PolicyDims {
            embed_dim: d,
            hidden: hd,
            n_patches: np,
            answer_vocab: av,
            ..
        } = self.dims;
        let v = self.values;
        let lay = &self.layout;

        // d log p_a / d logits = onehot(a) - softmax
        let g_logits: Vec<f64> = (0..av)
            .map(|k| {
                let p = cache.log_probs[k].exp();
                scale * (if k == a.0 { 1.0 } else { 0.0 } - p)
            })
            .collect();

        let mut g_hidden = vec![0.0; hd];
        for (k, gk) in g_logits.iter().enumerate() {
            out[lay.c.start + k] += gk;
            let row = lay.u.start + k * hd;
            for j in 0..hd {
                out[row + j] += gk * cache.hidden[j];
                g_hidden[j] += gk * v[row + j];
            }
        }

        let mut g_fq = vec![0.0; d];
        for j in 0..hd {
            let hj = cache.hidden[j];
            let g_pre = g_hidden[j] * (1.0 - hj * hj);
            out[lay.b.start + j] += g_pre;
            let wi = lay.w_img.start + j * np;
            for (p, f) in features.iter().enumerate() {
                out[wi + p] += g_pre * f;
            }
            let wq = lay.w_q.start + j * d;
            for (m, fq) in cache.question_feature.iter().enumerate() {
                out[wq + m] += g_pre * fq;
                g_fq[m] += g_pre * v[wq + m];
            }
        }

        let n = q.tokens().len() as f64;
        for &t in q.tokens() {
            let row = lay.embed.start + t * d;
            for m in 0..d {
                out[row + m] += g_fq[m] / n;
            }
        }
        Ok(cache.log_probs[a.0])
    }
}

impl PolicyParams {
    pub fn forward_features(&self, q: &TokenSeq, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.as_view().forward_cached(q, features)?.log_probs)
    }

    pub fn log_prob_features(&self, q: &TokenSeq, features: &[f64], a: AnswerId) -> Result<f64> {
        self.as_view().log_prob_features(q, features, a)
    }

    pub fn accumulate_log_prob_grad(
        &self,
        q: &TokenSeq,
        features: &[f64],
        a: AnswerId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        self.as_view()
            .accumulate_log_prob_grad(q, features, a, scale, out)
    }

    pub fn featurize(&self, img: &ImageGrid) -> Result<Vec<f64>> {
        image_features(img, self.dims.patch_grid()?)
    }
}

/// Log-probabilities over the whole answer vocabulary.
pub fn forward(params: &PolicyParams, q: &TokenSeq, img: &ImageGrid) -> Result<Vec<f64>> {
    params.forward_features(q, &params.featurize(img)?)
}

pub fn log_prob(params: &PolicyParams, q: &TokenSeq, img: &ImageGrid, a: AnswerId) -> Result<f64> {
    params.log_prob_features(q, &params.featurize(img)?, a)
}

pub fn grad_log_prob(
    params: &PolicyParams,
    q: &TokenSeq,
    img: &ImageGrid,
    a: AnswerId,
) -> Result<Vec<f64>> {
    let feats = params.featurize(img)?;
    let mut g = vec![0.0; params.len()];
    params.accumulate_log_prob_grad(q, &feats, a, 1.0, &mut g)?;
    Ok(g)
}

/// Sidecar metadata stored next to a flat parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSidecar {
    pub dims: PolicyDims,
    pub seed: u64,
    pub param_count: usize,
}

/// Path of the JSON sidecar for a parameter file (`x.bin` → `x.json`).
pub fn sidecar_path(bin: &Path) -> std::path::PathBuf {
    bin.with_extension("json")
}

/// Writes params as little-endian f64s plus a JSON sidecar of dims and seed.
pub fn save_params(params: &PolicyParams, seed: u64, bin: impl AsRef<Path>) -> Result<()> {
    let bin = bin.as_ref();
    let bytes: Vec<u8> = params
        .values
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    std::fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
    let side = ParamsSidecar {
        dims: params.dims,
        seed,
        param_count: params.len(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::json("sidecar", e))?;
    let side_path = sidecar_path(bin);
    std::fs::write(&side_path, json + "\n").map_err(|e| Error::io(side_path, e))
}

pub fn load_params(bin: impl AsRef<Path>) -> Result<(PolicyParams, ParamsSidecar)> {
    let bin = bin.as_ref();
    let side_path = sidecar_path(bin);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: ParamsSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::json(side_path.display().to_string(), e))?;
    let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != side.param_count * 8 || side.param_count != side.dims.param_count() {
        return Err(Error::Validation(format!(
            "{} holds {} bytes; sidecar expects {} parameters",
            bin.display(),
            bytes.len(),
            side.param_count
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((PolicyParams::from_flat(side.dims, values)?, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::imageops::pixelate;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_question(seed: u64, vocab: usize) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        TokenSeq::new((0..n).map(|_| rng.gen_range(0..vocab)).collect(), vocab).unwrap()
    }

    /// Straight-line evaluation of the policy formula, independent of the layout code.
    fn naive_forward(p: &PolicyParams, q: &TokenSeq, img: &ImageGrid) -> Vec<f64> {
        let dm = *p.dims();
        let v = p.as_flat();
        let (d, h, np, qv, av) = (
            dm.embed_dim,
            dm.hidden,
            dm.n_patches,
            dm.question_vocab,
            dm.answer_vocab,
        );
        let embed = &v[0..qv * d];
        let w_img = &v[qv * d..qv * d + h * np];
        let w_q = &v[qv * d + h * np..qv * d + h * np + h * d];
        let b = &v[qv * d + h * np + h * d..qv * d + h * np + h * d + h];
        let u_start = qv * d + h * np + h * d + h;
        let u = &v[u_start..u_start + av * h];
        let c = &v[u_start + av * h..];
        let g = 4;
        let tw = img.width() / g;
        let th = img.height() / g;
        let mut f_i = vec![];
        for py in 0..g {
            for px in 0..g {
                let mut s = 0.0;
                for y in py * th..(py + 1) * th {
                    for x in px * tw..(px + 1) * tw {
                        s += img.get(x, y);
                    }
                }
                f_i.push(s / (tw * th) as f64);
            }
        }
        let mut f_q = vec![0.0; d];
        for t in q.tokens() {
            for m in 0..d {
                f_q[m] += embed[t * d + m] / q.tokens().len() as f64;
            }
        }
        let hid: Vec<f64> = (0..h)
            .map(|j| {
                let mut s = b[j];
                for p in 0..np {
                    s += w_img[j * np + p] * f_i[p];
                }
                for m in 0..d {
                    s += w_q[j * d + m] * f_q[m];
                }
                s.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..av)
            .map(|a| c[a] + (0..h).map(|j| u[a * h + j] * hid[j]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        logits.iter().map(|z| z - lse).collect()
    }

    #[test]
    fn param_count_matches_formula() {
        let d = PolicyDims::default();
        assert_eq!(d.param_count(), 16 * 32 + 32 * 16 + 32 * 16 + 32 + 16 * 32 + 16);
        assert_eq!(d.patch_grid().unwrap(), 4);
        let bad = PolicyDims {
            n_patches: 15,
            ..d
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn image_features_examples() {
        let c = ImageGrid::filled(32, 32, 0.3).unwrap();
        assert!(image_features(&c, 4).unwrap().iter().all(|v| (*v - 0.3).abs() < 1e-15));

        let mut px = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                px[y * 4 + x] = match (x / 2, y / 2) {
                    (0, 0) => 0.0,
                    (1, 0) => 0.25,
                    (0, 1) => 0.5,
                    _ => 1.0,
                };
            }
        }
        let quad = ImageGrid::new(4, 4, px).unwrap();
        assert_eq!(image_features(&quad, 2).unwrap(), vec![0.0, 0.25, 0.5, 1.0]);
        assert!(image_features(&quad, 5).is_err());

        let img = random_image(32, 32, 3);
        let direct = image_features(&img, 4).unwrap();
        let pooled = image_features(&pixelate(&img, 8).unwrap(), 4).unwrap();
        for (a, b) in direct.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let p = PolicyParams::zeros(PolicyDims::default()).unwrap();
        let q = random_question(1, 32);
        let img = random_image(32, 32, 1);
        let lp = forward(&p, &q, &img).unwrap();
        assert!(lp.iter().all(|v| (*v + 16f64.ln()).abs() < 1e-15));
        let l = log_prob(&p, &q, &img, AnswerId(5)).unwrap();
        assert!((l - (-2.772_588_722_239_781)).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for seed in 0..10 {
            let p = init_params(PolicyDims::default(), seed).unwrap();
            let mut scaled = p.clone();
            scaled.as_flat_mut().iter_mut().for_each(|v| *v *= 20.0);
            let q = random_question(seed, 32);
            let img = random_image(32, 32, seed + 50);
            for params in [&p, &scaled] {
                let fast = forward(params, &q, &img).unwrap();
                let slow = naive_forward(params, &q, &img);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12);
                }
                let total: f64 = fast.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_probs_normalize_and_argmax_bound() {
        let p = init_params(PolicyDims::default(), 4).unwrap();
        let q = random_question(4, 32);
        let img = random_image(32, 32, 4);
        let lps: Vec<f64> = (0..16)
            .map(|a| log_prob(&p, &q, &img, AnswerId(a)).unwrap())
            .collect();
        assert!(lps.iter().all(|v| *v <= 0.0));
        let total: f64 = lps.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let best = lps.iter().cloned().fold(f64::MIN, f64::max);
        assert!(best >= -(16f64.ln()));
        assert!(log_prob(&p, &q, &img, AnswerId(16)).is_err());
    }

    #[test]
    fn permuting_answer_rows_permutes_outputs() {
        let p = init_params(PolicyDims::default(), 8).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let pp = p.permute_answers(&perm).unwrap();
        let q = random_question(8, 32);
        let img = random_image(32, 32, 8);
        let a = forward(&p, &q, &img).unwrap();
        let b = forward(&pp, &q, &img).unwrap();
        for i in 0..16 {
            assert!((b[i] - a[perm[i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_gradient_closed_form() {
        let p = init_params(PolicyDims::default(), 9).unwrap();
        let q = random_question(9, 32);
        let img = random_image(32, 32, 9);
        let a = AnswerId(3);
        let g = grad_log_prob(&p, &q, &img, a).unwrap();
        let probs: Vec<f64> = forward(&p, &q, &img).unwrap().iter().map(|v| v.exp()).collect();
        let c_start = p.len() - 16;
        for k in 0..16 {
            let expected = if k == 3 { 1.0 } else { 0.0 } - probs[k];
            assert!((g[c_start + k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_tokens_get_zero_gradient() {
        let p = init_params(PolicyDims::default(), 10).unwrap();
        let q = TokenSeq::new(vec![2, 5, 5], 32).unwrap();
        let img = random_image(32, 32, 10);
        let g = grad_log_prob(&p, &q, &img, AnswerId(0)).unwrap();
        for t in 0..32 {
            let row = &g[t * 16..(t + 1) * 16];
            if t == 2 || t == 5 {
                assert!(row.iter().any(|v| *v != 0.0));
            } else {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn grad_log_prob_passes_fd_check() {
        for seed in 0..20 {
            let mut p = init_params(PolicyDims::default(), 100 + seed).unwrap();
            let scale = if seed % 2 == 0 { 1.0 } else { 3.0 };
            p.as_flat_mut().iter_mut().for_each(|v| *v *= scale);
            let q = random_question(seed, 32);
            let img = random_image(32, 32, 200 + seed);
            let a = AnswerId(seed as usize % 16);
            let feats = p.featurize(&img).unwrap();
            let g = grad_log_prob(&p, &q, &img, a).unwrap();
            let f = |x: &[f64]| p.view(x).log_prob_features(&q, &feats, a).unwrap();
            let rep = grad_check(f, p.as_flat(), &g, 1e-4).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn init_is_seeded_and_clone_is_independent() {
        let d = PolicyDims::default();
        let a = init_params(d, 7).unwrap();
        let b = init_params(d, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.as_flat().iter().all(|v| v.abs() <= 0.1));
        let c = init_params(d, 8).unwrap();
        let differ = a
            .as_flat()
            .iter()
            .zip(c.as_flat())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differ as f64 >= 0.99 * a.len() as f64);

        let mut orig = a.clone();
        let frozen = clone_as_reference(&orig);
        orig.as_flat_mut()[0] += 1.0;
        assert_eq!(frozen, b);
    }

    #[test]
    fn vision_branch_is_live() {
        let p = init_params(PolicyDims::default(), 11).unwrap();
        let q = random_question(11, 32);
        let a = forward(&p, &q, &ImageGrid::filled(32, 32, 0.0).unwrap()).unwrap();
        let b = forward(&p, &q, &ImageGrid::filled(32, 32, 1.0).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn params_round_trip_through_disk() {
        let p = init_params(PolicyDims::default(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.bin");
        save_params(&p, 12, &path).unwrap();
        let (back, side) = load_params(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(side.seed, 12);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &p.as_flat()[0].to_le_bytes());
        std::fs::write(&path, &bytes[..16]).unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = PolicyParams::zeros(PolicyDims::default()).unwrap();
        let q = TokenSeq::new(vec![1], 32).unwrap();
        assert!(p.forward_features(&q, &[0.0; 15]).is_err());
        assert!(TokenSeq::new(vec![], 32).is_err());
        assert!(TokenSeq::new(vec![32], 32).is_err());
        let wide = TokenSeq::new(vec![40], 64).unwrap();
        assert!(p.forward_features(&wide, &[0.0; 16]).is_err());
    }
}
