//! Per-joint motion tokens from joint clips.
//!
//! Two backends sit behind [`EncoderAdapter`]: [`ReferenceEncoder`], a small
//! video transformer (tubelet embedding followed by pre-norm transformer
//! blocks) that trains on a CPU, and [`PretrainedEncoder`], which wraps an
//! externally supplied backbone and takes care of resizing, normalization and
//! token reduction. Every joint goes through the same encoder instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cropper::{Clip, JointClipSet};
use crate::error::{Error, Result};
use crate::lora::LoraHost;
use crate::nn::{ForwardCtx, LayerKind, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal_matrix, Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionToken<F> {
    pub vector: Vec<F>,
}

impl<F: Scalar> MotionToken<F> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    /// Box average over an integer downscale factor.
    Area,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub frames: usize,
    pub size: usize,
    pub resize: ResizeMethod,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Resamples a clip to the encoder geometry and normalizes `(v/255 − mean)/std`.
/// Output layout is `[t][y][x][c]`.
pub fn preprocess_clip<F: Scalar>(clip: &Clip, spec: &PreprocessSpec) -> Result<Vec<F>> {
    if clip.frames == 0 || clip.height == 0 || clip.width == 0 {
        return Err(Error::Shape("empty clip".into()));
    }
    if spec.resize == ResizeMethod::Area
        && (!clip.height.is_multiple_of(spec.size) || !clip.width.is_multiple_of(spec.size))
    {
        return Err(Error::Shape(format!(
            "area resize needs {}x{} to be a multiple of {}",
            clip.height, clip.width, spec.size
        )));
    }
    let s = spec.size;
    let mut out = Vec::with_capacity(spec.frames * s * s * 3);
    let scale: [f64; 3] = std::array::from_fn(|c| 1.0 / (255.0 * spec.std[c]));
    let shift: [f64; 3] = std::array::from_fn(|c| spec.mean[c] / spec.std[c]);
    for t in 0..spec.frames {
        let src_t = t * clip.frames / spec.frames;
        match spec.resize {
            ResizeMethod::Area => {
                let (fy, fx) = (clip.height / s, clip.width / s);
                let inv = 1.0 / (fy * fx) as f64;
                for oy in 0..s {
                    for ox in 0..s {
                        let mut acc = [0u32; 3];
                        for y in oy * fy..(oy + 1) * fy {
                            for x in ox * fx..(ox + 1) * fx {
                                let p = clip.pixel(src_t, y, x);
                                for c in 0..3 {
                                    acc[c] += p[c] as u32;
                                }
                            }
                        }
                        for c in 0..3 {
                            out.push(F::of(acc[c] as f64 * inv * scale[c] - shift[c]));
                        }
                    }
                }
            }
            ResizeMethod::Bilinear => {
                let ry = clip.height as f64 / s as f64;
                let rx = clip.width as f64 / s as f64;
                for oy in 0..s {
                    let sy = ((oy as f64 + 0.5) * ry - 0.5).clamp(0.0, (clip.height - 1) as f64);
                    let y0 = sy.floor() as usize;
                    let y1 = (y0 + 1).min(clip.height - 1);
                    let wy = sy - y0 as f64;
                    for ox in 0..s {
                        let sx =
                            ((ox as f64 + 0.5) * rx - 0.5).clamp(0.0, (clip.width - 1) as f64);
                        let x0 = sx.floor() as usize;
                        let x1 = (x0 + 1).min(clip.width - 1);
                        let wx = sx - x0 as f64;
                        let (p00, p01) = (clip.pixel(src_t, y0, x0), clip.pixel(src_t, y0, x1));
                        let (p10, p11) = (clip.pixel(src_t, y1, x0), clip.pixel(src_t, y1, x1));
                        for c in 0..3 {
                            let top = p00[c] as f64 * (1.0 - wx) + p01[c] as f64 * wx;
                            let bot = p10[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                            let v = top * (1.0 - wy) + bot * wy;
                            out.push(F::of(v * scale[c] - shift[c]));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    /// Use the classification slot (row 0) when the backbone has one, else the mean.
    ClassToken,
    Mean,
}

/// Collapses the per-position outputs of an encoder into one token.
pub fn token_from_encoder_output<F: Scalar>(
    outputs: &Matrix<F>,
    reduction: TokenReduction,
    has_class_token: bool,
) -> Result<MotionToken<F>> {
    if outputs.rows() == 0 {
        return Err(Error::Internal("encoder produced no output positions".into()));
    }
    if reduction == TokenReduction::ClassToken && has_class_token {
        return Ok(MotionToken {
            vector: outputs.row(0).to_vec(),
        });
    }
    let n = F::of(outputs.rows() as f64);
    let mut v = vec![F::zero(); outputs.cols()];
    for i in 0..outputs.rows() {
        for (a, &b) in v.iter_mut().zip(outputs.row(i)) {
            *a += b;
        }
    }
    for a in &mut v {
        *a /= n;
    }
    Ok(MotionToken { vector: v })
}

/// A named linear layer of a transformer block, as exposed to adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
}

/// Shared motion encoder for all joints.
pub trait EncoderAdapter<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn preprocess_spec(&self) -> &PreprocessSpec;
    /// Linear layers per transformer block, first block first.
    fn block_layers(&self) -> Vec<Vec<LayerInfo>>;
    fn trainable(&self) -> bool;
    /// Inference-mode encoding of a single clip.
    fn encode_joint_clip(&self, clip: &Clip) -> Result<MotionToken<F>>;

    /// Encodes every joint of a segment into a `J × d` matrix.
    fn encode_clip_set(&self, set: &JointClipSet) -> Result<Matrix<F>> {
        let mut data = Vec::with_capacity(set.joints() * self.dim());
        for clip in &set.clips {
            data.extend(self.encode_joint_clip(clip)?.vector);
        }
        Matrix::from_vec(set.joints(), self.dim(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceEncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub tubelet_frames: usize,
    pub patch: usize,
    /// Fraction of embedding channels whose tubelet filters are initialised
    /// with zero mean over time, so they respond to change rather than to
    /// static appearance.
    pub temporal_contrast: f64,
    pub preprocess: PreprocessSpec,
}

impl Default for ReferenceEncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            mlp_hidden: 64,
            blocks: 2,
            tubelet_frames: 6,
            patch: 8,
            temporal_contrast: 1.0,
            preprocess: PreprocessSpec {
                frames: 30,
                size: 24,
                resize: ResizeMethod::Area,
                mean: [0.5; 3],
                std: [0.25; 3],
            },
        }
    }
}

impl ReferenceEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("encoder needs at least one block and a hidden width".into());
        }
        if self.tubelet_frames == 0 || !p.frames.is_multiple_of(self.tubelet_frames) {
            return bad(format!(
                "tubelet length {} must divide {} frames",
                self.tubelet_frames, p.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.temporal_contrast) {
            return bad(format!("temporal_contrast {} outside [0, 1]", self.temporal_contrast));
        }
        if self.patch == 0 || !p.size.is_multiple_of(self.patch) {
            return bad(format!("patch {} must divide input size {}", self.patch, p.size));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.preprocess.size / self.patch;
        self.preprocess.frames / self.tubelet_frames * side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.tubelet_frames * self.patch * self.patch * 3
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let h = self.norm1.forward(tape, bound, x);
        let a = self.attn.forward(tape, bound, h, ctx).output;
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, bound, x);
        let h = self.fc1.forward(tape, bound, h, ctx);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, bound, h, ctx);
        tape.add(x, h)
    }

    fn linears(&self) -> Vec<&Linear> {
        let [q, k, v, o] = self.attn.linears();
        vec![q, k, v, o, &self.fc1, &self.fc2]
    }
}

/// Subtracts, for the first `rows` filters, the mean over the tubelet's time
/// axis at every spatial position and channel, rescaled to keep the variance.
fn remove_temporal_mean<F: Scalar>(w: &mut Matrix<F>, rows: usize, frames: usize) {
    let per_frame = w.cols() / frames;
    let gain = F::of((frames as f64 / (frames - 1) as f64).sqrt());
    let tf = F::of(frames as f64);
    for r in 0..rows.min(w.rows()) {
        let row = w.row_mut(r);
        for k in 0..per_frame {
            let mean = (0..frames).map(|t| row[t * per_frame + k]).sum::<F>() / tf;
            for t in 0..frames {
                row[t * per_frame + k] = (row[t * per_frame + k] - mean) * gain;
            }
        }
    }
}

/// Tubelet-embedding video transformer with mean-pooled output.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder<F> {
    pub config: ReferenceEncoderConfig,
    params: ParamStore<F>,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
}

impl<F: Scalar> ReferenceEncoder<F> {
    pub fn new(config: ReferenceEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g = ParamGroup::Encoder;
        let d = config.d;
        let pd = config.patch_dim();
        let patch_embed = Linear::new(
            &mut params,
            "encoder.patch_embed",
            LayerKind::Other,
            pd,
            d,
            g,
            1.0 / (pd as f64).sqrt(),
            &mut rng,
        );
        let contrast = (config.temporal_contrast * d as f64).round() as usize;
        if contrast > 0 && config.tubelet_frames > 1 {
            let w = &mut params.get_mut(patch_embed.weight).value;
            remove_temporal_mean(w, contrast, config.tubelet_frames);
        }
        let pos_embed = params.add(
            "encoder.pos_embed",
            normal_matrix(config.tokens(), d, 0.02, &mut rng),
            g,
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let id = format!("encoder.blocks.{b}");
            let norm1 = LayerNorm::new(&mut params, &format!("{id}.norm1"), d, g);
            let attn =
                MultiHeadAttention::new(&mut params, &format!("{id}.attn"), d, config.heads, g, &mut rng);
            let norm2 = LayerNorm::new(&mut params, &format!("{id}.norm2"), d, g);
            let fc1 = Linear::new(
                &mut params,
                format!("{id}.mlp.fc1"),
                LayerKind::FeedForward,
                d,
                config.mlp_hidden,
                g,
                1.0 / (d as f64).sqrt(),
                &mut rng,
            );
            let fc2 = Linear::new(
                &mut params,
                format!("{id}.mlp.fc2"),
                LayerKind::FeedForward,
                config.mlp_hidden,
                d,
                g,
                1.0 / (config.mlp_hidden as f64).sqrt(),
                &mut rng,
            );
            blocks.push(EncoderBlock {
                norm1,
                attn,
                norm2,
                fc1,
                fc2,
            });
        }
        let final_norm = LayerNorm::new(&mut params, "encoder.final_norm", d, g);
        Ok(Self {
            config,
            params,
            patch_embed,
            pos_embed,
            blocks,
            final_norm,
        })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Splits a preprocessed clip into `tokens × patch_dim` tubelets.
    pub fn patchify(&self, clip: &Clip) -> Result<Matrix<F>> {
        let c = &self.config;
        let pre = preprocess_clip::<F>(clip, &c.preprocess)?;
        let s = c.preprocess.size;
        let (tf, p) = (c.tubelet_frames, c.patch);
        let side = s / p;
        let mut data = Vec::with_capacity(c.tokens() * c.patch_dim());
        for tt in 0..c.preprocess.frames / tf {
            for py in 0..side {
                for px in 0..side {
                    for dt in 0..tf {
                        let t = tt * tf + dt;
                        for dy in 0..p {
                            let y = py * p + dy;
                            let o = ((t * s + y) * s + px * p) * 3;
                            data.extend_from_slice(&pre[o..o + p * 3]);
                        }
                    }
                }
            }
        }
        Matrix::from_vec(c.tokens(), c.patch_dim(), data)
    }

    /// Tubelet embedding plus position embedding, the part LoRA never touches.
    pub fn stem(&self, clip: &Clip) -> Result<Matrix<F>> {
        let patches = self.patchify(clip)?;
        let mut x = self.patch_embed.apply(&self.params, &patches);
        x.add_assign(self.params.value(self.pos_embed));
        Ok(x)
    }

    pub fn bind(&self, tape: &mut Tape<F>, with_grad: bool) -> Bound {
        self.params.bind(tape, with_grad)
    }

    pub fn stem_on_tape(&self, tape: &mut Tape<F>, bound: &Bound, patches: Var, ctx: &mut ForwardCtx) -> Var {
        let x = self.patch_embed.forward(tape, bound, patches, ctx);
        tape.add(x, bound.var(self.pos_embed))
    }

    /// Transformer blocks and final norm: `tokens × d` outputs.
    pub fn outputs_from_stem(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        stem: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let mut x = stem;
        for b in &self.blocks {
            x = b.forward(tape, bound, x, ctx);
        }
        self.final_norm.forward(tape, bound, x)
    }

    /// Mean-reduced `1 × d` token from a stem.
    pub fn token_from_stem(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        stem: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let out = self.outputs_from_stem(tape, bound, stem, ctx);
        tape.mean_rows(out)
    }

    /// Full clip-to-token pass on a tape, including the tubelet embedding.
    pub fn token_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        patches: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let stem = self.stem_on_tape(tape, bound, patches, ctx);
        self.token_from_stem(tape, bound, stem, ctx)
    }

    /// Inference tokens for precomputed stems, `J × d`.
    pub fn tokens_from_stems(&self, stems: &[Matrix<F>]) -> Matrix<F> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut ctx = ForwardCtx::inference();
        let rows: Vec<Var> = stems
            .iter()
            .map(|s| {
                let v = tape.constant(s.clone());
                self.token_from_stem(&mut tape, &bound, v, &mut ctx)
            })
            .collect();
        let all = tape.stack_rows(&rows);
        tape.value(all).clone()
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }
}

impl<F: Scalar> EncoderAdapter<F> for ReferenceEncoder<F> {
    fn name(&self) -> &str {
        "reference"
    }

    fn dim(&self) -> usize {
        self.config.d
    }

    fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.config.preprocess
    }

    fn block_layers(&self) -> Vec<Vec<LayerInfo>> {
        self.blocks
            .iter()
            .map(|b| {
                b.linears()
                    .into_iter()
                    .map(|l| LayerInfo {
                        id: l.id.clone(),
                        kind: l.kind,
                        d_in: l.d_in,
                        d_out: l.d_out,
                    })
                    .collect()
            })
            .collect()
    }

    fn trainable(&self) -> bool {
        self.params.iter().any(|(_, p)| p.trainable)
    }

    fn encode_joint_clip(&self, clip: &Clip) -> Result<MotionToken<F>> {
        let stem = self.stem(clip)?;
        let m = self.tokens_from_stems(&[stem]);
        Ok(MotionToken {
            vector: m.row(0).to_vec(),
        })
    }

    fn encode_clip_set(&self, set: &JointClipSet) -> Result<Matrix<F>> {
        let stems = set
            .clips
            .iter()
            .map(|c| self.stem(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.tokens_from_stems(&stems))
    }
}

impl<F: Scalar> LoraHost<F> for ReferenceEncoder<F> {
    fn block_count(&self) -> usize {
        self.blocks.len()
    }

    fn block_parts(&mut self, block: usize) -> (Vec<&mut Linear>, &mut ParamStore<F>) {
        let b = &mut self.blocks[block];
        let [q, k, v, o] = b.attn.linears_mut();
        (vec![q, k, v, o, &mut b.fc1, &mut b.fc2], &mut self.params)
    }

    fn store(&self) -> &ParamStore<F> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }
}

/// An externally provided video backbone (weights loaded by the caller).
pub trait Backbone<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Input geometry and normalization the backbone was pretrained with.
    fn input_spec(&self) -> PreprocessSpec;
    fn has_class_token(&self) -> bool;
    /// Runs the backbone on a `[t][y][x][c]` buffer, returning `positions × d` outputs.
    fn forward(&self, input: &[F]) -> Result<Matrix<F>>;
    fn block_layers(&self) -> Vec<Vec<LayerInfo>>;
}

/// Adapter around a pretrained backbone: crops are resized bilinearly to the
/// backbone's native input and reduced to one token.
pub struct PretrainedEncoder<B> {
    backbone: B,
    spec: PreprocessSpec,
    pub reduction: TokenReduction,
}

impl<B> PretrainedEncoder<B> {
    pub fn new<F: Scalar>(backbone: B, reduction: TokenReduction) -> Self
    where
        B: Backbone<F>,
    {
        let mut spec = backbone.input_spec();
        spec.resize = ResizeMethod::Bilinear;
        Self {
            backbone,
            spec,
            reduction,
        }
    }
}

impl<F: Scalar, B: Backbone<F>> EncoderAdapter<F> for PretrainedEncoder<B> {
    fn name(&self) -> &str {
        self.backbone.name()
    }

    fn dim(&self) -> usize {
        self.backbone.dim()
    }

    fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    fn block_layers(&self) -> Vec<Vec<LayerInfo>> {
        self.backbone.block_layers()
    }

    fn trainable(&self) -> bool {
        false
    }

    fn encode_joint_clip(&self, clip: &Clip) -> Result<MotionToken<F>> {
        let input = preprocess_clip::<F>(clip, &self.spec)?;
        let out = self.backbone.forward(&input)?;
        if out.cols() != self.backbone.dim() {
            return Err(Error::Shape(format!(
                "backbone emitted width {}, expected {}",
                out.cols(),
                self.backbone.dim()
            )));
        }
        token_from_encoder_output(&out, self.reduction, self.backbone.has_class_token())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_with(f: impl Fn(usize, usize, usize) -> u8, frames: usize, size: usize) -> Clip {
        let mut c = Clip::zeros(frames, size, size);
        for t in 0..frames {
            for y in 0..size {
                for x in 0..size {
                    let v = f(t, y, x);
                    let o = ((t * size + y) * size + x) * 3;
                    c.data[o..o + 3].copy_from_slice(&[v, v / 2, 255 - v]);
                }
            }
        }
        c
    }

    #[test]
    fn mean_reduction_examples() {
        let same = Matrix::from_fn(5, 3, |_, j| j as f64 + 0.25);
        let t = token_from_encoder_output(&same, TokenReduction::Mean, false).unwrap();
        assert_eq!(t.vector, vec![0.25, 1.25, 2.25]);

        let one = Matrix::from_fn(1, 3, |_, j| j as f64 * 2.0);
        for r in [TokenReduction::Mean, TokenReduction::ClassToken] {
            let t = token_from_encoder_output(&one, r, true).unwrap();
            assert_eq!(t.vector, one.row(0).to_vec());
        }

        let out = Matrix::from_vec(4, 2, vec![1.0, -3.0, 0.5, 2.0, 7.25, 0.0, -1.0, 4.0]).unwrap();
        let t = token_from_encoder_output(&out, TokenReduction::Mean, false).unwrap();
        let mut direct = [0.0; 2];
        for i in 0..4 {
            for j in 0..2 {
                direct[j] += out.get(i, j);
            }
        }
        assert_eq!(t.vector, vec![direct[0] / 4.0, direct[1] / 4.0]);
        assert!(matches!(
            token_from_encoder_output(&Matrix::<f64>::zeros(0, 2), TokenReduction::Mean, false),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn class_slot_used_only_when_present() {
        let out = Matrix::from_vec(2, 1, vec![10.0, 20.0]).unwrap();
        let cls = token_from_encoder_output(&out, TokenReduction::ClassToken, true).unwrap();
        assert_eq!(cls.vector, vec![10.0]);
        let mean = token_from_encoder_output(&out, TokenReduction::ClassToken, false).unwrap();
        assert_eq!(mean.vector, vec![15.0]);
    }

    #[test]
    fn area_and_bilinear_preserve_constants() {
        let c = clip_with(|_, _, _| 100, 30, 120);
        for resize in [ResizeMethod::Area, ResizeMethod::Bilinear] {
            let spec = PreprocessSpec {
                frames: 30,
                size: 24,
                resize,
                mean: [0.0; 3],
                std: [1.0; 3],
            };
            let v = preprocess_clip::<f64>(&c, &spec).unwrap();
            assert_eq!(v.len(), 30 * 24 * 24 * 3);
            assert!((v[0] - 100.0 / 255.0).abs() < 1e-12);
            assert!((v[2] - 155.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn area_resize_rejects_fractional_factor() {
        let c = clip_with(|_, _, _| 1, 30, 100);
        let spec = ReferenceEncoderConfig::default().preprocess;
        assert!(matches!(preprocess_clip::<f32>(&c, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn reference_token_shape_and_determinism() {
        let cfg = ReferenceEncoderConfig::default();
        assert_eq!(cfg.tokens(), 45);
        let enc = ReferenceEncoder::<f32>::new(cfg, 3).unwrap();
        let c = clip_with(|t, y, x| ((t * 7 + y * 3 + x) % 256) as u8, 30, 120);
        let a = enc.encode_joint_clip(&c).unwrap();
        let b = enc.encode_joint_clip(&c.clone()).unwrap();
        assert_eq!(a.dim(), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn contrast_filters_ignore_static_clips() {
        let enc = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), 5).unwrap();
        let still = clip_with(|_, y, x| ((y * 5 + x * 3) % 256) as u8, 30, 120);
        let flat = clip_with(|_, _, _| 128, 30, 120);
        assert!(enc.stem(&still).unwrap().max_abs_diff(&enc.stem(&flat).unwrap()) < 1e-9);
        let moving = clip_with(|t, y, x| ((y * 5 + x * 3 + t * 7) % 256) as u8, 30, 120);
        assert!(enc.stem(&moving).unwrap().max_abs_diff(&enc.stem(&flat).unwrap()) > 1e-3);
    }

    #[test]
    fn block_layers_expose_the_four_kinds() {
        let enc = ReferenceEncoder::<f32>::new(ReferenceEncoderConfig::default(), 0).unwrap();
        let layers = enc.block_layers();
        assert_eq!(layers.len(), 2);
        let kinds: Vec<LayerKind> = layers[1].iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            vec![
                LayerKind::Query,
                LayerKind::Key,
                LayerKind::Value,
                LayerKind::Output,
                LayerKind::FeedForward,
                LayerKind::FeedForward
            ]
        );
        assert_eq!(layers[1][0].id, "encoder.blocks.1.attn.query");
    }

    struct MeanBackbone;

    impl Backbone<f64> for MeanBackbone {
        fn name(&self) -> &str {
            "mock"
        }
        fn dim(&self) -> usize {
            3
        }
        fn input_spec(&self) -> PreprocessSpec {
            PreprocessSpec {
                frames: 16,
                size: 224,
                resize: ResizeMethod::Bilinear,
                mean: [0.0; 3],
                std: [1.0; 3],
            }
        }
        fn has_class_token(&self) -> bool {
            true
        }
        fn forward(&self, input: &[f64]) -> Result<Matrix<f64>> {
            assert_eq!(input.len(), 16 * 224 * 224 * 3);
            let mut cls = [0.0; 3];
            for px in input.chunks(3) {
                for c in 0..3 {
                    cls[c] += px[c];
                }
            }
            let n = (input.len() / 3) as f64;
            let mut data = cls.map(|v| v / n).to_vec();
            data.extend([9.0, 9.0, 9.0]);
            Matrix::from_vec(2, 3, data)
        }
        fn block_layers(&self) -> Vec<Vec<LayerInfo>> {
            Vec::new()
        }
    }

    #[test]
    fn pretrained_adapter_resizes_and_takes_class_slot() {
        let enc = PretrainedEncoder::new(MeanBackbone, TokenReduction::ClassToken);
        let c = clip_with(|_, _, _| 51, 30, 120);
        let t = EncoderAdapter::<f64>::encode_joint_clip(&enc, &c).unwrap();
        assert!((t.vector[0] - 0.2).abs() < 1e-12);
        assert!((t.vector[1] - 25.0 / 255.0).abs() < 1e-12);
        assert!(!EncoderAdapter::<f64>::trainable(&enc));
    }

    fn tiny_config() -> ReferenceEncoderConfig {
        ReferenceEncoderConfig {
            d: 8,
            heads: 2,
            mlp_hidden: 16,
            tubelet_frames: 2,
            patch: 8,
            preprocess: PreprocessSpec {
                frames: 4,
                size: 16,
                resize: ResizeMethod::Area,
                mean: [0.5; 3],
                std: [0.25; 3],
            },
            ..ReferenceEncoderConfig::default()
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut enc = ReferenceEncoder::<f64>::new(tiny_config(), 3).unwrap();
        enc.set_trainable(true);
        let clip = clip_with(|t, y, x| ((t * 31 + y * 17 + x * 7) % 256) as u8, 4, 16);
        let patches = enc.patchify(&clip).unwrap();
        let probe = Matrix::from_fn(1, 8, |_, j| 0.3 * j as f64 - 1.0);
        let run = |e: &ReferenceEncoder<f64>, grad: bool| {
            let mut tape = Tape::new();
            let bound = e.bind(&mut tape, grad);
            let x = tape.constant(patches.clone());
            let tok = e.token_on_tape(&mut tape, &bound, x, &mut ForwardCtx::inference());
            let w = tape.constant(probe.clone());
            let l = tape.matmul_nt(tok, w);
            (tape, bound, l)
        };
        let loss = |e: &ReferenceEncoder<f64>| {
            let (tape, _, l) = run(e, false);
            tape.scalar(l)
        };
        let (tape, bound, l) = run(&enc, true);
        let mut g = tape.backward(l);
        let grads = bound.collect(&mut g);
        let ids: Vec<_> = enc.params().ids().collect();
        let h = 1e-6;
        for id in ids {
            let analytic = grads.get(id).unwrap().clone();
            // Every entry of the small tensors, a strided sample of the patch embedding.
            let n = analytic.data().len();
            let step = if n > 512 { 37 } else { 1 };
            for k in (0..n).step_by(step) {
                let orig = enc.params().value(id).data()[k];
                enc.params_mut().get_mut(id).value.data_mut()[k] = orig + h;
                let up = loss(&enc);
                enc.params_mut().get_mut(id).value.data_mut()[k] = orig - h;
                let down = loss(&enc);
                enc.params_mut().get_mut(id).value.data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-4, "{}[{k}]: {a} vs {fd}", enc.params().get(id).name);
            }
        }
    }
}
