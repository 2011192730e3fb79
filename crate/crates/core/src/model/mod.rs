//! Encoder, decoder with dual- or single-stream cross-attention, query
//! fusion, reference points and prediction heads.

mod config;

pub use config::{Fusion, ModelConfig, Strategy, Stream};

use crate::error::{Error, Result};
use crate::nn;
use crate::query::{assemble_query_set, init_query_params, QueryInputs, QuerySet};
use crate::scene::Scene;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Focal-loss prior: foreground logits start at `logit(0.01)`.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
}

/// Patch vectors and normalized patch centres of one stub image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensors {
    /// `L × (patch²·channels)`.
    pub patches: Tensor,
    /// `L × 2`.
    pub centers: Tensor,
}

/// Flattens an `H × W × c` grid into non-overlapping `patch × patch` tiles in
/// raster order.
pub fn patchify(grid: &Tensor, patch: usize) -> Result<ImageTensors> {
    let s = grid.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", s, &[0, 0, 0]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!("{h}×{w} grid is not divisible by patch {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let v = grid.values();
    let mut patches = Vec::with_capacity(ph * pw * width);
    let mut centers = Vec::with_capacity(ph * pw * 2);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                patches.extend_from_slice(&v[row * c..(row + patch) * c]);
            }
            centers.push((px as f64 + 0.5) / pw as f64);
            centers.push((py as f64 + 0.5) / ph as f64);
        }
    }
    Ok(ImageTensors {
        patches: Tensor::new(vec![ph * pw, width], patches)?,
        centers: Tensor::new(vec![ph * pw, 2], centers)?,
    })
}

/// Keys and values the decoder attends to.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub tokens: Var,
    pub centers: Var,
    pub k_app: Var,
    pub k_pos: Var,
    pub values: Var,
}

/// Outputs of one decoder layer for the active (non-pad) queries.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `n × (n_classes + 1)`, background last.
    pub logits: Var,
    /// `n × 4` corner boxes.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub queries: QuerySet,
    /// Row indices of `queries` that were decoded.
    pub active: Vec<usize>,
    pub layers: Vec<LayerOutput>,
    /// Pre-sigmoid reference points, `n × 2`.
    pub ref_logits: Var,
    /// Cross-attention weights, per layer then per head, each `n × L`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub record_attention: bool,
}

/// Column ranges `[start, end)` gathered into one per-head block.
fn head_block(tape: &mut Tape, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
    let parts = ranges
        .iter()
        .map(|&(a, b)| tape.slice_last(x, a, b))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 1)
    }
}

/// Unscaled per-head logits `q_h · k_hᵀ`, where head `h` reads the columns
/// `ranges[h]` of both operands.
pub fn head_logits(tape: &mut Tape, q: Var, k: Var, ranges: &[Vec<(usize, usize)>]) -> Result<Vec<Var>> {
    ranges
        .iter()
        .map(|r| {
            let qh = head_block(tape, q, r)?;
            let kh = head_block(tape, k, r)?;
            let kt = tape.transpose(kh)?;
            tape.matmul(qh, kt)
        })
        .collect()
}

/// Scaled dot-product attention over explicit per-head column ranges.
/// Returns the concatenated head outputs and the weights.
fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    ranges: &[Vec<(usize, usize)>],
    dv: usize,
) -> Result<(Var, Vec<Var>)> {
    let logits = head_logits(tape, q, k, ranges)?;
    let mut outs = Vec::with_capacity(ranges.len());
    let mut weights = Vec::with_capacity(ranges.len());
    for (h, (l, r)) in logits.into_iter().zip(ranges).enumerate() {
        let width: usize = r.iter().map(|(a, b)| b - a).sum();
        let l = tape.scale(l, 1.0 / (width as f64).sqrt());
        let a = tape.softmax(l, 1)?;
        let vh = tape.slice_last(v, h * dv, (h + 1) * dv)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok((out, weights))
}

fn contiguous_heads(d: usize, heads: usize) -> Vec<Vec<(usize, usize)>> {
    let dh = d / heads;
    (0..heads).map(|h| vec![(h * dh, (h + 1) * dh)]).collect()
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let (d, q) = (cfg.d(), &cfg.query);
        let (d_app, d_pos) = (q.d_app, q.d_pos);
        let enc_w = 4 * cfg.n_freqs;
        let hidden = |w: usize| cfg.ffn_mult * w;

        init_query_params(&mut p, q, &mut rng);
        nn::init_linear(&mut p, "enc.embed", cfg.patch * cfg.patch * cfg.in_channels(), d, &mut rng);
        nn::init_linear(&mut p, "enc.pos", enc_w, d, &mut rng);
        for i in 0..cfg.enc_layers {
            for m in ["q", "k", "v", "o"] {
                nn::init_linear(&mut p, &format!("enc.{i}.attn.{m}"), d, d, &mut rng);
            }
            nn::init_layer_norm(&mut p, &format!("enc.{i}.ln1"), d);
            nn::init_mlp(&mut p, &format!("enc.{i}.ffn"), &[d, hidden(d), d], &mut rng);
            nn::init_layer_norm(&mut p, &format!("enc.{i}.ln2"), d);
        }
        nn::init_linear(&mut p, "mem.k_app", d, d_app, &mut rng);
        nn::init_linear(&mut p, "mem.k_pos", enc_w, d_pos, &mut rng);
        nn::init_linear(&mut p, "mem.v", d, d, &mut rng);

        for t in 0..cfg.dec_layers {
            for m in ["q", "k", "v", "o"] {
                nn::init_linear(&mut p, &format!("dec.{t}.self.{m}"), d, d, &mut rng);
            }
            nn::init_layer_norm(&mut p, &format!("dec.{t}.self.ln"), d);
            let c = format!("dec.{t}.cross");
            match cfg.stream {
                Stream::Dual => {
                    nn::init_linear(&mut p, &format!("{c}.qc"), d_app, d_app, &mut rng);
                    nn::init_linear(&mut p, &format!("{c}.qp"), d_pos, d_pos, &mut rng);
                    nn::init_linear(&mut p, &format!("{c}.kc"), d_app, d_app, &mut rng);
                    nn::init_linear(&mut p, &format!("{c}.kp"), d_pos, d_pos, &mut rng);
                }
                Stream::Single => {
                    nn::init_linear(&mut p, &format!("{c}.q"), d, d, &mut rng);
                    nn::init_linear(&mut p, &format!("{c}.k"), d, d, &mut rng);
                }
            }
            nn::init_linear(&mut p, &format!("{c}.qr"), enc_w, d_pos, &mut rng);
            nn::init_linear(&mut p, &format!("{c}.v"), d, d, &mut rng);
            nn::init_linear(&mut p, &format!("{c}.o"), d, d, &mut rng);
            nn::init_layer_norm(&mut p, &format!("{c}.ln"), d);
            match cfg.fusion {
                Fusion::None => {}
                Fusion::Partial => {
                    nn::init_layer_norm(&mut p, &format!("dec.{t}.fuse.ln"), d_app);
                    nn::init_mlp(&mut p, &format!("dec.{t}.fuse.ffn"), &[d_app, hidden(d_app), d_app], &mut rng);
                }
                Fusion::Full => {
                    nn::init_layer_norm(&mut p, &format!("dec.{t}.fuse.ln"), d);
                    nn::init_mlp(&mut p, &format!("dec.{t}.fuse.ffn"), &[d, hidden(d), d], &mut rng);
                }
            }
        }
        match cfg.strategy {
            Strategy::Fixed => {}
            Strategy::GlobalLearnable => p.insert("ref.global", Tensor::zeros(&[1, 2])),
            Strategy::PolygonPredict => nn::init_mlp(&mut p, "ref.ffn", &[d_pos, d_pos, 2], &mut rng),
        }
        nn::init_linear(&mut p, "head.cls", d, cfg.n_classes + 1, &mut rng);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        p.get_mut("head.cls.b").expect("just inserted").values_mut().fill(prior);
        nn::init_mlp(&mut p, "head.box", &[d, d, d, 4], &mut rng);
        p.get_mut("head.box.2.w").expect("just inserted").values_mut().fill(0.0);
        Ok(Self { cfg, params: p })
    }

    pub fn image_tensors(&self, scene: &Scene) -> Result<ImageTensors> {
        if scene.width != self.cfg.canvas || scene.height != self.cfg.canvas {
            return Err(Error::Invalid(format!(
                "scene canvas {}×{} does not match model canvas {}",
                scene.width, scene.height, self.cfg.canvas
            )));
        }
        patchify(&scene.features(self.cfg.n_classes), self.cfg.patch)
    }

    /// Patch embedding plus position projection, dense self-attention
    /// encoder layers, then the memory projections.
    pub fn encode(&self, tape: &mut Tape, image: &ImageTensors) -> Result<EncoderMemory> {
        let (p, cfg) = (&self.params, &self.cfg);
        let d = cfg.d();
        let x = tape.leaf(&image.patches);
        let centers = tape.leaf(&image.centers);
        let pe = tape.sine_encode(centers, &cfg.freqs())?;
        let tok = nn::linear(tape, p, "enc.embed", x)?;
        let pos = nn::linear(tape, p, "enc.pos", pe)?;
        let mut h = tape.add(tok, pos)?;
        for i in 0..cfg.enc_layers {
            let q = nn::linear(tape, p, &format!("enc.{i}.attn.q"), h)?;
            let k = nn::linear(tape, p, &format!("enc.{i}.attn.k"), h)?;
            let v = nn::linear(tape, p, &format!("enc.{i}.attn.v"), h)?;
            let (a, _) = attend(tape, q, k, v, &contiguous_heads(d, cfg.heads), d / cfg.heads)?;
            let a = nn::linear(tape, p, &format!("enc.{i}.attn.o"), a)?;
            let r = tape.add(h, a)?;
            h = nn::layer_norm(tape, p, &format!("enc.{i}.ln1"), r)?;
            let f = nn::mlp(tape, p, &format!("enc.{i}.ffn"), 2, h)?;
            let r = tape.add(h, f)?;
            h = nn::layer_norm(tape, p, &format!("enc.{i}.ln2"), r)?;
        }
        let k_app = nn::linear(tape, p, "mem.k_app", h)?;
        let k_pos = nn::linear(tape, p, "mem.k_pos", pe)?;
        let values = nn::linear(tape, p, "mem.v", h)?;
        Ok(EncoderMemory {
            tokens: h,
            centers,
            k_app,
            k_pos,
            values,
        })
    }

    /// Multi-head self-attention among the given (already unpadded) queries,
    /// residual, LayerNorm.
    pub fn decoder_self_attention(&self, tape: &mut Tape, t: usize, q: Var) -> Result<Var> {
        let (p, d) = (&self.params, self.cfg.d());
        let n = format!("dec.{t}.self");
        let qq = nn::linear(tape, p, &format!("{n}.q"), q)?;
        let kk = nn::linear(tape, p, &format!("{n}.k"), q)?;
        let vv = nn::linear(tape, p, &format!("{n}.v"), q)?;
        let (a, _) = attend(tape, qq, kk, vv, &contiguous_heads(d, self.cfg.heads), d / self.cfg.heads)?;
        let a = nn::linear(tape, p, &format!("{n}.o"), a)?;
        let r = tape.add(q, a)?;
        nn::layer_norm(tape, p, &format!("{n}.ln"), r)
    }

    /// Per-head `(semantic, positional)` column ranges of a `[c ; p]` row.
    pub fn stream_heads(&self) -> Vec<Vec<(usize, usize)>> {
        let q = &self.cfg.query;
        let (hc, hp) = (q.d_app / self.cfg.heads, q.d_pos / self.cfg.heads);
        (0..self.cfg.heads)
            .map(|h| vec![(h * hc, (h + 1) * hc), (q.d_app + h * hp, q.d_app + (h + 1) * hp)])
            .collect()
    }

    /// Projected cross-attention queries and keys, both laid out
    /// `[semantic ; positional]`. `ref_enc` is the sinusoidal encoding of the
    /// queries' reference points.
    pub fn cross_projections(
        &self,
        tape: &mut Tape,
        t: usize,
        q: Var,
        mem: &EncoderMemory,
        ref_enc: Var,
    ) -> Result<(Var, Var)> {
        let (p, cfg) = (&self.params, &self.cfg);
        let (d_app, d) = (cfg.query.d_app, cfg.d());
        let c = format!("dec.{t}.cross");
        let r = nn::linear(tape, p, &format!("{c}.qr"), ref_enc)?;
        match cfg.stream {
            Stream::Dual => {
                let q_sem = tape.slice_last(q, 0, d_app)?;
                let q_pos = tape.slice_last(q, d_app, d)?;
                let cq = nn::linear(tape, p, &format!("{c}.qc"), q_sem)?;
                let pq = nn::linear(tape, p, &format!("{c}.qp"), q_pos)?;
                let pq = tape.add(pq, r)?;
                let ck = nn::linear(tape, p, &format!("{c}.kc"), mem.k_app)?;
                let pk = nn::linear(tape, p, &format!("{c}.kp"), mem.k_pos)?;
                Ok((tape.concat(&[cq, pq], 1)?, tape.concat(&[ck, pk], 1)?))
            }
            Stream::Single => {
                let n = tape.shape(q)[0];
                let qj = nn::linear(tape, p, &format!("{c}.q"), q)?;
                let zeros = tape.constant(vec![n, d_app], vec![0.0; n * d_app])?;
                let r_full = tape.concat(&[zeros, r], 1)?;
                let qj = tape.add(qj, r_full)?;
                let keys = tape.concat(&[mem.k_app, mem.k_pos], 1)?;
                let kj = nn::linear(tape, p, &format!("{c}.k"), keys)?;
                Ok((qj, kj))
            }
        }
    }

    /// Unscaled per-head cross-attention logits, `n × L` each.
    pub fn cross_logits(
        &self,
        tape: &mut Tape,
        t: usize,
        q: Var,
        mem: &EncoderMemory,
        ref_enc: Var,
    ) -> Result<Vec<Var>> {
        let (qp, kp) = self.cross_projections(tape, t, q, mem, ref_enc)?;
        head_logits(tape, qp, kp, &self.stream_heads())
    }

    /// Cross-attention block: logits per head are the sum of the semantic and
    /// positional dot products, one softmax per query, output projection,
    /// residual and LayerNorm.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        t: usize,
        q: Var,
        mem: &EncoderMemory,
        ref_enc: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (p, d) = (&self.params, self.cfg.d());
        let c = format!("dec.{t}.cross");
        let (qp, kp) = self.cross_projections(tape, t, q, mem, ref_enc)?;
        let v = nn::linear(tape, p, &format!("{c}.v"), mem.values)?;
        let (a, w) = attend(tape, qp, kp, v, &self.stream_heads(), d / self.cfg.heads)?;
        let a = nn::linear(tape, p, &format!("{c}.o"), a)?;
        let r = tape.add(q, a)?;
        Ok((nn::layer_norm(tape, p, &format!("{c}.ln"), r)?, w))
    }

    /// `Q_{t+1}` from `Q_t` and the cross-attention output `F_t`.
    pub fn adaptive_fusion_update(&self, tape: &mut Tape, t: usize, q: Var, f: Var) -> Result<Var> {
        let p = &self.params;
        let (d_app, d) = (self.cfg.query.d_app, self.cfg.d());
        let sum = tape.add(q, f)?;
        match self.cfg.fusion {
            Fusion::None => Ok(sum),
            Fusion::Full => {
                let h = nn::layer_norm(tape, p, &format!("dec.{t}.fuse.ln"), sum)?;
                nn::mlp(tape, p, &format!("dec.{t}.fuse.ffn"), 2, h)
            }
            Fusion::Partial => {
                let sem = tape.slice_last(sum, 0, d_app)?;
                let h = nn::layer_norm(tape, p, &format!("dec.{t}.fuse.ln"), sem)?;
                let h = nn::mlp(tape, p, &format!("dec.{t}.fuse.ffn"), 2, h)?;
                let pos = tape.slice_last(q, d_app, d)?;
                tape.concat(&[h, pos], 1)
            }
        }
    }

    /// Pre-sigmoid reference points `s`, `n × 2`, from the positional blocks
    /// of the initial queries.
    pub fn compute_reference_points(&self, tape: &mut Tape, q_pos: Var) -> Result<Var> {
        let n = tape.shape(q_pos)[0];
        match self.cfg.strategy {
            Strategy::Fixed => tape.constant(vec![n, 2], vec![0.0; n * 2]),
            Strategy::GlobalLearnable => {
                let s = self.params.bind(tape, "ref.global")?;
                tape.gather_rows(s, &vec![0; n])
            }
            Strategy::PolygonPredict => nn::mlp(tape, &self.params, "ref.ffn", 2, q_pos),
        }
    }

    /// Sinusoidal encoding of `σ(s)`.
    pub fn reference_encoding(&self, tape: &mut Tape, ref_logits: Var) -> Result<Var> {
        let pts = tape.sigmoid(ref_logits);
        tape.sine_encode(pts, &self.cfg.freqs())
    }

    /// Class logits and decoded boxes from decoder output `h`.
    pub fn predict_heads(&self, tape: &mut Tape, h: Var, ref_logits: Var) -> Result<LayerOutput> {
        let logits = nn::linear(tape, &self.params, "head.cls", h)?;
        let disp = nn::mlp(tape, &self.params, "head.box", 3, h)?;
        let boxes = tape.box_decode(ref_logits, disp)?;
        Ok(LayerOutput { logits, boxes })
    }

    /// Builds queries, encodes the image and runs every decoder layer. Pad
    /// queries are dropped before decoding; they neither attend nor are
    /// attended to.
    pub fn forward_pass(
        &self,
        tape: &mut Tape,
        image: &ImageTensors,
        inputs: &QueryInputs,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (d_app, d) = (cfg.query.d_app, cfg.d());
        let queries = assemble_query_set(tape, &self.params, &cfg.query, inputs)?;
        let active = queries.active();
        if active.is_empty() {
            return Err(Error::AllMasked);
        }
        let mut q = if active.len() == queries.len() {
            queries.embedding
        } else {
            tape.gather_rows(queries.embedding, &active)?
        };
        let mem = self.encode(tape, image)?;
        let q_pos = tape.slice_last(q, d_app, d)?;
        let ref_logits = self.compute_reference_points(tape, q_pos)?;
        let ref_enc = self.reference_encoding(tape, ref_logits)?;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        let mut attention = Vec::new();
        for t in 0..cfg.dec_layers {
            let qs = self.decoder_self_attention(tape, t, q)?;
            let (f, w) = self.cross_attention(tape, t, qs, &mem, ref_enc)?;
            if opts.record_attention {
                attention.push(w);
            }
            q = self.adaptive_fusion_update(tape, t, qs, f)?;
            layers.push(self.predict_heads(tape, q, ref_logits)?);
        }
        Ok(ForwardOutput {
            queries,
            active,
            layers,
            ref_logits,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_layout() {
        let vals: Vec<f64> = (0..4 * 4 * 2).map(|v| v as f64).collect();
        let g = Tensor::new(vec![4, 4, 2], vals).unwrap();
        let it = patchify(&g, 2).unwrap();
        assert_eq!(it.patches.shape(), &[4, 8]);
        // first patch: pixels (0,0),(1,0),(0,1),(1,1)
        assert_eq!(it.patches.row(0), &[0., 1., 2., 3., 8., 9., 10., 11.]);
        assert_eq!(it.centers.row(1), &[0.75, 0.25]);
        assert!(patchify(&g, 3).is_err());
    }

    #[test]
    fn parse_flags() {
        assert_eq!("polygon_predict".parse::<Strategy>().unwrap(), Strategy::PolygonPredict);
        assert_eq!(Fusion::Partial.to_string(), "partial");
        assert!("triple".parse::<Stream>().is_err());
    }
}
