use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lora::{linear_lora, LoraVars};
use super::rope::{rope_var, RotaryTable};
use super::{
    concat_references, AttentionTrace, Branch, BranchWeights, LoraAdapter, LoraSet, ModelConfig,
    ModelError,
};
use crate::correspondence::Grid;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct BranchIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct LoraIdx {
    a: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    image: BranchIdx,
    text: BranchIdx,
    lora: [LoraIdx; 3],
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    time: usize,
    text_tokens: usize,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

/// The toy multi-reference diffusion transformer.
///
/// Parameters live in one ordered, named list so that optimizers,
/// checkpoints and gradient checks can treat them uniformly.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    layout: Layout,
}

enum Init {
    Zero,
    Normal(f64),
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
            }
        };
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn branch(&mut self, prefix: &str, d: usize, hidden: usize) -> BranchIdx {
        let s = 1.0 / (d as f64).sqrt();
        BranchIdx {
            // Zero queries make every attention map uniform at init.
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Zero),
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Normal(s)),
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Normal(s)),
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Zero),
            w1: self.add(format!("{prefix}.w1"), &[d, hidden], Init::Normal(s)),
            b1: self.add(format!("{prefix}.b1"), &[hidden], Init::Zero),
            w2: self.add(format!("{prefix}.w2"), &[hidden, d], Init::Zero),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zero),
        }
    }
}

/// Inputs of one forward pass. Token payloads are `[tokens × d_in]`.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub noisy_target: &'a Tensor,
    pub time: f64,
    pub target_grid: Grid,
    pub refs: &'a [Tensor],
    pub ref_grids: &'a [Grid],
    pub valid_mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute the traced reference→target attention against detached target
    /// keys, so attention losses only train the reference queries.
    pub stop_grad_target_keys: bool,
}

/// The three token streams between blocks, each `[rows × d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct Streams {
    pub target: Var,
    pub text: Var,
    pub reference: Var,
}

/// Rotary tables for each stream of one input.
#[derive(Debug, Clone)]
pub struct RotaryTables {
    pub target: RotaryTable,
    pub text: RotaryTable,
    pub reference: RotaryTable,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predicted velocity, `[N_tgt × d_in]`.
    pub velocity: Var,
    /// `(block, head, [N_ref × N_tgt])` per recorded slice.
    pub slices: Vec<(usize, usize, Var)>,
    /// Mean of `slices`.
    pub average: Var,
}

impl ForwardOutput {
    pub fn trace(&self, tape: &Tape) -> AttentionTrace {
        AttentionTrace {
            slices: self
                .slices
                .iter()
                .map(|&(b, h, v)| (b, h, tape.tensor(v)))
                .collect(),
            averaged: tape.tensor(self.average),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            names: Vec::new(),
        };
        let embed_w = b.add(
            "embed.w".into(),
            &[config.d_in, d],
            Init::Normal(1.0 / (config.d_in as f64).sqrt()),
        );
        let embed_b = b.add("embed.b".into(), &[d], Init::Zero);
        let time = b.add("embed.time".into(), &[d], Init::Normal(1.0));
        let text_tokens = b.add("text.tokens".into(), &[config.n_text, d], Init::Normal(1.0));
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let image = b.branch(&format!("block{l}.image"), d, config.mlp_hidden);
            let text = b.branch(&format!("block{l}.text"), d, config.mlp_hidden);
            let r = config.lora_rank;
            let mut lora = [LoraIdx { a: 0, b: 0 }; 3];
            for (slot, proj) in lora.iter_mut().zip(["q", "k", "v"]) {
                *slot = LoraIdx {
                    a: b.add(
                        format!("block{l}.lora.{proj}.a"),
                        &[r, d],
                        Init::Normal(1.0 / (d as f64).sqrt()),
                    ),
                    b: b.add(format!("block{l}.lora.{proj}.b"), &[d, r], Init::Zero),
                };
            }
            blocks.push(BlockIdx { image, text, lora });
        }
        let head_w = b.add(
            "head.w".into(),
            &[d, config.d_in],
            Init::Normal(1.0 / (d as f64).sqrt()),
        );
        let head_b = b.add("head.b".into(), &[config.d_in], Init::Zero);
        Ok(Self {
            config,
            params: b.params,
            names: b.names,
            layout: Layout {
                embed_w,
                embed_b,
                time,
                text_tokens,
                blocks,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces every parameter, checking names and shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        if named.len() != self.params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                named.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&self.params)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(ModelError::Shape(format!(
                    "tensor {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Records every parameter as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if requires_grad {
                    tape.leaf(&p.clone().with_requires_grad(true))
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    /// Writes `d(loss)/d(param)` into each parameter's `grad`.
    pub fn assign_grads(&mut self, grads: &Gradients, vars: &[Var]) -> Result<(), ModelError> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            grads.write_into(v, p)?;
        }
        Ok(())
    }

    fn branch_of(&self, block: usize, branch: Branch) -> &BranchIdx {
        let b = &self.layout.blocks[block];
        match branch {
            Branch::Text => &b.text,
            Branch::Target | Branch::Reference(_) => &b.image,
        }
    }

    /// Copies of one branch's weights. Target and reference share weights.
    pub fn branch_weights(&self, block: usize, branch: Branch) -> BranchWeights {
        let i = *self.branch_of(block, branch);
        let p = |k: usize| self.params[k].clone();
        BranchWeights {
            wq: p(i.wq),
            wk: p(i.wk),
            wv: p(i.wv),
            wo: p(i.wo),
            w1: p(i.w1),
            b1: p(i.b1),
            w2: p(i.w2),
            b2: p(i.b2),
        }
    }

    pub fn lora(&self, block: usize) -> LoraSet {
        let l = &self.layout.blocks[block].lora;
        let ad = |i: LoraIdx| LoraAdapter {
            a: self.params[i.a].clone(),
            b: self.params[i.b].clone(),
            scale: self.config.lora_scale,
        };
        LoraSet {
            q: ad(l[0]),
            k: ad(l[1]),
            v: ad(l[2]),
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        let d_in = self.config.d_in;
        let (n, w) = input.noisy_target.dims2()?;
        if n != input.target_grid.tokens() || w != d_in {
            return Err(ModelError::Shape(format!(
                "target tokens {:?} do not match grid {}x{} with d_in {d_in}",
                input.noisy_target.shape(),
                input.target_grid.height,
                input.target_grid.width
            )));
        }
        if input.refs.len() != input.ref_grids.len() || input.refs.len() != input.valid_mask.len() {
            return Err(ModelError::Shape(format!(
                "{} reference payloads, {} grids, {} mask entries",
                input.refs.len(),
                input.ref_grids.len(),
                input.valid_mask.len()
            )));
        }
        for (k, (r, g)) in input.refs.iter().zip(input.ref_grids).enumerate() {
            let (n, w) = r.dims2()?;
            if n != g.tokens() || w != d_in {
                return Err(ModelError::Shape(format!(
                    "reference {} tokens {:?} do not match grid {}x{} with d_in {d_in}",
                    k + 1,
                    r.shape(),
                    g.height,
                    g.width
                )));
            }
        }
        Ok(())
    }

    pub fn rotary_tables(&self, input: &ModelInput) -> Result<RotaryTables, ModelError> {
        let rope = self.config.rope();
        let d = self.config.d_model;
        let target =
            RotaryTable::build(&input.target_grid.positions(), d, &rope, Branch::Target)?;
        let text = RotaryTable::build(&vec![(0, 0); self.config.n_text], d, &rope, Branch::Text)?;
        let mut reference = RotaryTable::default();
        for (k, g) in input.ref_grids.iter().enumerate() {
            reference.extend(RotaryTable::build(
                &g.positions(),
                d,
                &rope,
                Branch::Reference(k + 1),
            )?);
        }
        Ok(RotaryTables {
            target,
            text,
            reference,
        })
    }

    /// Full forward pass. `vars` must come from [`Model::bind`] on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &ModelInput,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_input(input)?;
        if vars.len() != self.params.len() {
            return Err(ModelError::Contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let lay = &self.layout;
        let tables = self.rotary_tables(input)?;

        let x = tape.constant(input.noisy_target);
        let tgt = tape.matmul(x, vars[lay.embed_w])?;
        let tgt = tape.add_row(tgt, vars[lay.embed_b])?;
        let time = tape.scale(vars[lay.time], input.time);
        let tgt = tape.add_row(tgt, time)?;

        let refs = concat_references(input.refs, input.valid_mask)?;
        let r = tape.constant(&refs);
        let reference = tape.matmul(r, vars[lay.embed_w])?;
        let reference = tape.add_row(reference, vars[lay.embed_b])?;

        let mut streams = Streams {
            target: tgt,
            text: vars[lay.text_tokens],
            reference,
        };
        let mut slices = Vec::with_capacity(self.config.blocks * self.config.heads);
        for block in 0..self.config.blocks {
            streams = self.block_forward(tape, vars, block, streams, &tables, opts, &mut slices)?;
        }

        let v = tape.matmul(streams.target, vars[lay.head_w])?;
        let velocity = tape.add_row(v, vars[lay.head_b])?;

        let mut total = slices[0].2;
        for &(_, _, s) in &slices[1..] {
            total = tape.add(total, s)?;
        }
        let average = tape.scale(total, 1.0 / slices.len() as f64);
        Ok(ForwardOutput {
            velocity,
            slices,
            average,
        })
    }

    /// One joint-attention block. Appends one `(block, head, slice)` per head
    /// to `trace`.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: usize,
        streams: Streams,
        tables: &RotaryTables,
        opts: ForwardOptions,
        trace: &mut Vec<(usize, usize, Var)>,
    ) -> Result<Streams, ModelError> {
        let b = &self.layout.blocks[block];
        let (img, txt) = (b.image, b.text);
        let lora_vars = |i: usize| {
            Some(LoraVars {
                a: vars[b.lora[i].a],
                b: vars[b.lora[i].b],
                scale: self.config.lora_scale,
            })
        };
        let n_t = tape.shape(streams.target)[0];
        let n_x = tape.shape(streams.text)[0];
        let n_r = tape.shape(streams.reference)[0];
        let n = n_t + n_x + n_r;
        let ref_start = n_t + n_x;

        let qkv = |tape: &mut Tape, x: Var, w: usize, lora: Option<LoraVars>, table: Option<&RotaryTable>| -> Result<Var, ModelError> {
            let y = linear_lora(tape, x, vars[w], lora)?;
            match table {
                Some(t) => rope_var(tape, y, t),
                None => Ok(y),
            }
        };
        let q_t = qkv(tape, streams.target, img.wq, None, Some(&tables.target))?;
        let k_t = qkv(tape, streams.target, img.wk, None, Some(&tables.target))?;
        let v_t = qkv(tape, streams.target, img.wv, None, None)?;
        let q_x = qkv(tape, streams.text, txt.wq, None, Some(&tables.text))?;
        let k_x = qkv(tape, streams.text, txt.wk, None, Some(&tables.text))?;
        let v_x = qkv(tape, streams.text, txt.wv, None, None)?;
        let q_r = qkv(tape, streams.reference, img.wq, lora_vars(0), Some(&tables.reference))?;
        let k_r = qkv(tape, streams.reference, img.wk, lora_vars(1), Some(&tables.reference))?;
        let v_r = qkv(tape, streams.reference, img.wv, lora_vars(2), None)?;

        let q = tape.concat_rows(&[q_t, q_x, q_r])?;
        let k = tape.concat_rows(&[k_t, k_x, k_r])?;
        let v = tape.concat_rows(&[v_t, v_x, v_r])?;

        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
            let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
            let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
            let kh_t = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kh_t)?;
            let logits = tape.scale(logits, inv_sqrt);
            let attn = tape.softmax_rows(logits)?;
            heads.push(tape.matmul(attn, vh)?);

            // Reference queries against target keys only, renormalized.
            let ref_tgt = if opts.stop_grad_target_keys {
                let qr = tape.slice_rows(qh, ref_start, n)?;
                let kt = tape.slice_rows(kh, 0, n_t)?;
                let kt = tape.detach(kt);
                let kt_t = tape.transpose(kt)?;
                let lg = tape.matmul(qr, kt_t)?;
                tape.scale(lg, inv_sqrt)
            } else {
                let rows = tape.slice_rows(logits, ref_start, n)?;
                tape.slice_cols(rows, 0, n_t)?
            };
            trace.push((block, h, tape.softmax_rows(ref_tgt)?));
        }
        let o = tape.concat_cols(&heads)?;
        let o_t = tape.slice_rows(o, 0, n_t)?;
        let o_x = tape.slice_rows(o, n_t, ref_start)?;
        let o_r = tape.slice_rows(o, ref_start, n)?;

        let residual = |tape: &mut Tape, x: Var, o: Var, br: BranchIdx| -> Result<Var, ModelError> {
            let a = tape.matmul(o, vars[br.wo])?;
            let x = tape.add(x, a)?;
            let hdn = tape.matmul(x, vars[br.w1])?;
            let hdn = tape.add_row(hdn, vars[br.b1])?;
            let hdn = tape.gelu(hdn);
            let m = tape.matmul(hdn, vars[br.w2])?;
            let m = tape.add_row(m, vars[br.b2])?;
            Ok(tape.add(x, m)?)
        };
        Ok(Streams {
            target: residual(tape, streams.target, o_t, img)?,
            text: residual(tape, streams.text, o_x, txt)?,
            reference: residual(tape, streams.reference, o_r, img)?,
        })
    }

    /// Convenience: forward without gradients, returning the velocity and the
    /// attention trace as values.
    pub fn infer(
        &self,
        input: &ModelInput,
        opts: ForwardOptions,
    ) -> Result<(Tensor, AttentionTrace), ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, input, opts)?;
        Ok((tape.tensor(out.velocity), out.trace(&tape)))
    }
}
