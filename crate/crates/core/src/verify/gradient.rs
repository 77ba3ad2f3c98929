use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    init_params, pad_slices, text_tokens, tower_blocks, tower_head, vision_forward, vision_tokens, ChunkTensor,
    EncoderConfig, PaddingMode, Tokenizer, LOGIT_BIAS, LOG_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::numkernel::{grad_check_on, Bound, ParamStore, Tape, Tensor, Var};
use crate::objective::{batch_loss, sigmoid_pair_loss_value};

/// Worst entry of a whole-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradReport {
    /// max |analytic - central| / max(1, |central|).
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_entry: usize,
    pub entries: usize,
}

/// Inputs for a whole-model check: seeded parameters, one random chunk of
/// `patch_z` slices and one short description per batch item.
pub fn model_fixture(
    cfg: &EncoderConfig,
    seed: u64,
    batch: usize,
) -> Result<(ParamStore, Vec<ChunkTensor>, Vec<Vec<usize>>)> {
    const TEXTS: [&str; 4] = ["liver lesion", "normal lung", "heart", "kidney not examined"];
    if batch == 0 || batch > TEXTS.len() {
        return Err(Error::contract(format!("fixture batch must be in 1..={}", TEXTS.len())));
    }
    let store = init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let side = cfg.in_plane_size;
    let chunks = (0..batch)
        .map(|_| {
            let data = (0..cfg.patch_z * side * side)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            ChunkTensor::from_slices(side, side, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let tok = Tokenizer::new(cfg.text_vocab_size, cfg.text_max_len);
    let texts = TEXTS[..batch].iter().map(|t| tok.encode(t)).collect();
    Ok((store, chunks, texts))
}

type TokenFn<'a> = Box<dyn Fn(&mut Tape, &Bound, usize) -> Result<Var> + 'a>;

/// One tower bound once as constants, with the unperturbed input of every
/// stage cached per batch item. Stage 0 is the token embedding, stage `i + 1`
/// is block `i` and stage `layers + 1` is the head. A parameter of stage `s`
/// cannot change anything computed before it, so a replay starts from the
/// cached input of `s` and reproduces the full forward exactly.
struct TowerReplay<'a> {
    tower: &'static str,
    tape: Tape,
    bound: Bound,
    leaves: usize,
    inputs: Vec<Vec<Tensor>>,
    tokens: TokenFn<'a>,
    items: usize,
    cfg: &'a EncoderConfig,
    base: f64,
}

impl<'a> TowerReplay<'a> {
    fn new(
        store: &ParamStore,
        tower: &'static str,
        items: usize,
        tokens: TokenFn<'a>,
        cfg: &'a EncoderConfig,
        base: f64,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &format!("{tower}."), false);
        let leaves = tape.len();
        let layers = cfg.layers;
        let mut inputs = vec![Vec::with_capacity(items); layers + 2];
        for item in 0..items {
            let mut h = tokens(&mut tape, &bound, item)?;
            inputs[1].push(tape.value(h).clone());
            for i in 0..layers {
                h = tower_blocks(&mut tape, &bound, tower, h, i..i + 1, cfg, base)?;
                inputs[i + 2].push(tape.value(h).clone());
            }
        }
        Ok(TowerReplay {
            tower,
            tape,
            bound,
            leaves,
            inputs,
            tokens,
            items,
            cfg,
            base,
        })
    }

    fn stage_of(&self, name: &str) -> usize {
        let rest = &name[self.tower.len() + 1..];
        if let Some(block) = rest.strip_prefix("blocks.") {
            let i: usize = block.split('.').next().and_then(|i| i.parse().ok()).unwrap_or(0);
            i + 1
        } else if rest.starts_with("final_ln.") || rest == "proj" {
            self.cfg.layers + 1
        } else {
            0
        }
    }

    /// `[items, E]` embeddings recomputed from `stage` onwards.
    fn embed(&mut self, stage: usize) -> Result<Tensor> {
        self.tape.truncate(self.leaves);
        let mut rows = Vec::with_capacity(self.items);
        for item in 0..self.items {
            let h = if stage == 0 {
                (self.tokens)(&mut self.tape, &self.bound, item)?
            } else {
                self.tape.constant(self.inputs[stage][item].clone())
            };
            let first = stage.saturating_sub(1);
            let h = tower_blocks(
                &mut self.tape,
                &self.bound,
                self.tower,
                h,
                first..self.cfg.layers,
                self.cfg,
                self.base,
            )?;
            let z = tower_head(&mut self.tape, &self.bound, self.tower, h, self.cfg)?;
            rows.push(self.tape.value(z).data().to_vec());
        }
        Tensor::from_rows(&rows)
    }
}

/// Central-difference check of the batch loss over every entry of every
/// parameter in `store`.
///
/// The analytic pass records the full loss on a tape from `make_tape`. The
/// numeric pass re-encodes only the tower that owns the perturbed entry,
/// starting at the stage the entry feeds, and scores it with the tape-free
/// loss; this gives the same central differences as re-running the batch.
pub fn model_grad_check<T>(
    cfg: &EncoderConfig,
    store: &ParamStore,
    chunks: &[ChunkTensor],
    texts: &[Vec<usize>],
    h: f64,
    make_tape: T,
) -> Result<ModelGradReport>
where
    T: Fn() -> Tape,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut tape = make_tape();
    let bound = store.bind(&mut tape, "", true);
    let loss = batch_loss(&mut tape, &bound, chunks, texts, cfg)?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape);
    drop(tape);

    let vision: TokenFn = Box::new(|t, p, i| vision_tokens(t, p, &chunks[i], cfg));
    let text: TokenFn = Box::new(|t, p, i| text_tokens(t, p, &texts[i], cfg));
    let mut towers = [
        TowerReplay::new(store, "vision", chunks.len(), vision, cfg, cfg.rope_base)?,
        TowerReplay::new(store, "text", texts.len(), text, cfg, cfg.rope_base)?,
    ];
    let img = towers[0].embed(0)?;
    let txt = towers[1].embed(0)?;
    let log_t = store.get(LOG_TEMPERATURE)?.item()?;
    let bias = store.get(LOGIT_BIAS)?.item()?;

    let mut report = ModelGradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_entry: 0,
        entries: 0,
    };
    for (name, value) in store.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for `{name}`")))?;
        let tower = towers.iter().position(|t| name.starts_with(&format!("{}.", t.tower)));
        for e in 0..value.numel() {
            let orig = value.data()[e];
            let mut at = |x: f64| -> Result<f64> {
                match tower {
                    Some(k) => {
                        let replay = &mut towers[k];
                        let var = replay.bound.get(name)?;
                        let stage = replay.stage_of(name);
                        replay.tape.leaf_mut(var)?.data_mut()[e] = x;
                        let emb = replay.embed(stage);
                        replay.tape.leaf_mut(var)?.data_mut()[e] = orig;
                        if k == 0 {
                            sigmoid_pair_loss_value(&emb?, &txt, log_t, bias)
                        } else {
                            sigmoid_pair_loss_value(&img, &emb?, log_t, bias)
                        }
                    }
                    None if name == LOG_TEMPERATURE => sigmoid_pair_loss_value(&img, &txt, x, bias),
                    None if name == LOGIT_BIAS => sigmoid_pair_loss_value(&img, &txt, log_t, x),
                    None => Err(Error::contract(format!("parameter `{name}` belongs to no tower"))),
                }
            };
            let central = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            let mut err = (grad.data()[e] - central).abs() / central.abs().max(1.0);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_entry = e;
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

/// Checks of ops the encoder does not exercise with its default inputs:
/// attention and pooling with padded keys, and repeat-padded chunks.
pub fn padded_op_checks<T>(make_tape: T, seed: u64) -> Result<f64>
where
    T: Fn() -> Tape + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let pad = [false, false, true, false, true];
    let (q, k, v) = (random(&[2, 5, 4])?, random(&[2, 5, 4])?, random(&[2, 5, 4])?);
    let w = random(&[2, 5, 4])?;
    let attn = grad_check_on(
        make_tape,
        |t, p| {
            let q = t.rope(p[0], &[0, 1, 2, 3, 4], 100.0)?;
            let k = t.rope(p[1], &[0, 1, 2, 3, 4], 100.0)?;
            let y = t.attention(q, k, p[2], &pad)?;
            let y = t.mul_const(y, w.clone())?;
            t.sum(y)
        },
        &[q, k, v],
        1e-5,
    )?;
    let x = random(&[5, 3])?;
    let w = random(&[3])?;
    let pool = grad_check_on(
        make_tape,
        |t, p| {
            let y = t.masked_mean_pool(p[0], &pad)?;
            let y = t.mul_const(y, w.clone())?;
            t.sum(y)
        },
        &[x],
        1e-5,
    )?;
    // a one-slice chunk repeat-padded to the patch depth still carries gradients
    let cfg = EncoderConfig {
        channels: 4,
        heads: 2,
        layers: 1,
        in_plane_size: 4,
        patch_xy: 2,
        patch_z: 2,
        text_vocab_size: 8,
        text_max_len: 4,
        embed_dim: 2,
        rope_base: 50.0,
        ..EncoderConfig::tiny()
    };
    let store = init_params(&cfg, seed)?;
    let one = ChunkTensor::from_slices(4, 4, random(&[16])?.into_data())?;
    let chunk = pad_slices(&one, PaddingMode::Repeat, cfg.patch_z)?;
    let names: Vec<String> = store.names().cloned().collect();
    let values: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let padded = grad_check_on(
        make_tape,
        |t, vars| {
            let p: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let z = vision_forward(t, &p, &chunk, &cfg, cfg.rope_base)?;
            t.sum(z)
        },
        &values,
        1e-5,
    )?;
    Ok(attn.max_rel_error.max(pool.max_rel_error).max(padded.max_rel_error))
}
