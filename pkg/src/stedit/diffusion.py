"""DDPM machinery specialized for instruction-conditioned inpainting.

NoiseSchedule arrays are indexed 1..T with alphabar[0] = 1 by convention.
Training regresses the injected noise (eps-prediction); with probability
p_uncond both conditioning contexts are swapped for a learned null context
so classifier-free guidance works at sampling time. Both samplers re-impose
the known pixels outside the mask after every step, so outputs are
pixel-exact there.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import nn
from .autodiff import Tensor, no_grad
from .encoders import CharEncoder, CharVocab, EncoderOutput, InstrEncoder, InstrVocab
from .errors import ConfigError, TrainingFault
from .unet import ModelConfig, UNet


# -- schedule -------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray  # beta[0] unused; beta[t] for t in 1..T
    alpha: np.ndarray
    alphabar: np.ndarray  # alphabar[0] = 1

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 200, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alphabar = np.ones(T + 1, dtype=np.float64)
    for t in range(1, T + 1):
        alphabar[t] = alphabar[t - 1] * alpha[t]
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha, alphabar)


def q_sample(x0: np.ndarray, t, alphabar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t scalar or per-batch."""
    ab = alphabar[np.asarray(t)]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# -- model wrapper -----------------------------------------------------------------

class Denoiser(nn.Module):
    """UNet + both encoders + learned null contexts; the full eps-model."""

    def __init__(self, config: ModelConfig, char_vocab: CharVocab,
                 instr_vocab: InstrVocab, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.instr_enc = InstrEncoder(rng, instr_vocab, dtype=dtype)
        self.char_enc = CharEncoder(rng, char_vocab, dtype=dtype)
        self.unet = UNet(config, rng, dtype=dtype)
        self.null_instr = Tensor(rng.normal(0, 0.02, (1, 1, config.d_ctx)).astype(dtype),
                                 requires_grad=True)
        self.null_char = Tensor(rng.normal(0, 0.02, (1, 1, config.d_ctx)).astype(dtype),
                                requires_grad=True)

    def encode_contexts(self, instr_ids: np.ndarray, char_ids: np.ndarray,
                        uncond: np.ndarray | None = None):
        """Encoder outputs for a batch, with per-example null substitution."""
        instr = self.instr_enc(instr_ids)
        char = self.char_enc(char_ids) if self.config.char_branch_enabled else None
        if uncond is not None and uncond.any():
            keep = Tensor((~uncond).astype(instr.embeddings.dtype).reshape(-1, 1, 1))
            drop = Tensor(uncond.astype(instr.embeddings.dtype).reshape(-1, 1, 1))
            instr = EncoderOutput(
                instr.embeddings * keep + self.null_instr * drop,
                np.where(uncond[:, None], True, instr.valid),
            )
            if char is not None:
                char = EncoderOutput(
                    char.embeddings * keep + self.null_char * drop,
                    np.where(uncond[:, None], True, char.valid),
                )
        return instr, char

    def null_contexts(self, batch: int, length: int):
        """Fully unconditional contexts for classifier-free guidance."""
        ones = np.ones((batch, length), dtype=bool)
        tile = np.zeros((batch, length, 1), dtype=self.null_instr.dtype)
        instr = EncoderOutput(self.null_instr + Tensor(tile), ones)
        char = EncoderOutput(self.null_char + Tensor(tile), ones)
        return instr, char

    def predict_eps(self, x_t: np.ndarray, t, mask: np.ndarray,
                    masked_image: np.ndarray, instr: EncoderOutput,
                    char: EncoderOutput | None) -> Tensor:
        x_cat = np.concatenate([x_t, mask, masked_image], axis=1)
        return self.unet(Tensor(x_cat), t, instr, char)


def build_model(model_cfg: ModelConfig, char_vocab: CharVocab,
                instr_vocab: InstrVocab, schedule: NoiseSchedule,
                seed: int = 0, dtype=np.float32) -> Denoiser:
    m = Denoiser(model_cfg, char_vocab, instr_vocab, seed=seed, dtype=dtype)
    m.unet.time.t_max = schedule.T
    return m


# -- training -------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, named_params: list, lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.named_params = named_params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self) -> dict:
        out = {}
        for name, _ in self.named_params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict):
        for name, _ in self.named_params:
            if f"opt.m.{name}" in tensors:
                self.m[name] = tensors[f"opt.m.{name}"].astype(np.float64)
                self.v[name] = tensors[f"opt.v.{name}"].astype(np.float64)
        # moments were saved as f32; keep parameter dtype
        for name, p in self.named_params:
            self.m[name] = self.m[name].astype(p.data.dtype)
            self.v[name] = self.v[name].astype(p.data.dtype)


def training_step(model: Denoiser, schedule: NoiseSchedule, batch: dict,
                  rng: np.random.Generator, p_uncond: float = 0.1,
                  step: int = 0) -> float:
    """One eps-prediction MSE step; gradients left in the parameters.

    batch: x0 (B,3,H,W) in [-1,1], mask (B,1,H,W) in {0,1},
    masked_image (B,3,H,W), instr_ids (B,L), char_ids (B,L)."""
    x0 = batch["x0"]
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, schedule.alphabar, eps)
    uncond = rng.random(b) < p_uncond
    instr, char = model.encode_contexts(batch["instr_ids"], batch["char_ids"], uncond)
    eps_hat = model.predict_eps(x_t, t, batch["mask"], batch["masked_image"],
                                instr, char)
    diff = eps_hat - Tensor(eps)
    loss = (diff * diff).mean()
    value = float(loss.data)
    if np.isnan(value) or np.isinf(value):
        raise TrainingFault(f"non-finite loss {value} at step {step} (t={t.tolist()})")
    loss.backward()
    return value


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 1000

    def to_dict(self):
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d):
        known = set(vars(cls()))
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def tensors_of(model: Denoiser) -> dict:
    return {name: p.data for name, p in model.named_parameters()}


def save_checkpoint(path: str, model: Denoiser, schedule: NoiseSchedule,
                    step: int = 0, train_cfg: TrainConfig | None = None,
                    optimizer: AdamW | None = None, extra: dict | None = None):
    config = {
        "model": model.config.to_dict(),
        "char_vocab": model.char_enc.vocab.to_dict(),
        "instr_vocab": model.instr_enc.vocab.to_dict(),
        "schedule": schedule.to_dict(),
        "step": step,
    }
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    if extra:
        config.update(extra)
    tensors = tensors_of(model)
    if optimizer is not None:
        tensors = dict(tensors)
        tensors.update(optimizer.state_tensors())
    ckpt_io.save(path, config, tensors)


def load_checkpoint(path: str, dtype=np.float32):
    """Rebuild a Denoiser (+schedule, config blob, raw tensors) from disk."""
    config, tensors = ckpt_io.load(path)
    model_cfg = ModelConfig.from_dict(config["model"])
    char_vocab = CharVocab.from_dict(config["char_vocab"])
    instr_vocab = InstrVocab.from_dict(config["instr_vocab"])
    schedule = make_schedule(**config["schedule"])
    model = build_model(model_cfg, char_vocab, instr_vocab, schedule, dtype=dtype)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ConfigError(f"checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(p.data.shape):
            raise ConfigError(
                f"checkpoint tensor {name!r} shape {tensors[name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data = tensors[name].astype(dtype)
    return model, schedule, config, tensors


class ExampleStore:
    """Manifest examples kept as compact uint8 arrays, batched on demand."""

    def __init__(self, manifest_path: str, char_vocab: CharVocab,
                 instr_vocab: InstrVocab):
        from .synth import load_example_images, load_manifest

        records = load_manifest(manifest_path)
        if not records:
            raise ConfigError(f"empty manifest: {manifest_path}")
        self.records = records
        imgs, masks, instr_ids, char_ids = [], [], [], []
        for rec in records:
            img, mask = load_example_images(manifest_path, rec)
            imgs.append(img)
            masks.append(mask)
            instr_ids.append(instr_vocab.tokenize(rec["instruction"]["rendered"]))
            char_ids.append(char_vocab.tokenize(rec["target_text"]))
        self.images = np.stack(imgs)
        self.masks = np.stack(masks)
        self.instr_ids = np.stack(instr_ids)
        self.char_ids = np.stack(char_ids)

    def __len__(self):
        return len(self.records)

    def batch(self, idx: np.ndarray, dtype=np.float32) -> dict:
        x0 = self.images[idx].astype(dtype).transpose(0, 3, 1, 2) / 127.5 - 1.0
        mask = self.masks[idx].astype(dtype)[:, None]
        return {
            "x0": x0,
            "mask": mask,
            "masked_image": x0 * (1.0 - mask),
            "instr_ids": self.instr_ids[idx],
            "char_ids": self.char_ids[idx],
        }


def train(manifest_path: str, model: Denoiser, schedule: NoiseSchedule,
          train_cfg: TrainConfig, out_dir: str,
          resume_optimizer: dict | None = None, start_step: int = 0,
          log_callback=None, extra_config: dict | None = None) -> str:
    """Run the training loop; returns the final checkpoint path.

    Writes metrics.csv (step,loss,lr,seconds) and periodic checkpoints with
    optimizer state so runs can resume."""
    os.makedirs(out_dir, exist_ok=True)
    store = ExampleStore(manifest_path, model.char_enc.vocab, model.instr_enc.vocab)
    opt = AdamW(list(model.named_parameters()), lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay)
    if resume_optimizer:
        opt.load_state(resume_optimizer)
        opt.step_count = start_step
    rng = np.random.default_rng([train_cfg.seed, start_step])
    ckpt_path = os.path.join(out_dir, "model.dste")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if start_step and os.path.exists(metrics_path) else "w"
    t0 = time.time()
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "lr", "seconds"])
        for step in range(start_step + 1, train_cfg.steps + 1):
            idx = rng.choice(len(store), size=train_cfg.batch,
                             replace=len(store) < train_cfg.batch)
            batch = store.batch(idx)
            model.zero_grad()
            loss = training_step(model, schedule, batch, rng,
                                 p_uncond=train_cfg.p_uncond, step=step)
            opt.step()
            if step % train_cfg.log_every == 0 or step == train_cfg.steps:
                writer.writerow([step, f"{loss:.6f}", train_cfg.lr,
                                 f"{time.time() - t0:.2f}"])
                fh.flush()
            if log_callback is not None:
                log_callback(step, loss)
            if step % train_cfg.ckpt_every == 0 or step == train_cfg.steps:
                save_checkpoint(ckpt_path, model, schedule, step=step,
                                train_cfg=train_cfg, optimizer=opt,
                                extra=extra_config)
    return ckpt_path


# -- sampling -------------------------------------------------------------------

@dataclass
class Conditioning:
    instr_ids: np.ndarray  # (B, L)
    char_ids: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, 1, H, W) in {0, 1}
    masked_image: np.ndarray  # (B, 3, H, W) in [-1, 1], zero inside mask


def _guided_eps(model: Denoiser, x: np.ndarray, t: int, cond: Conditioning,
                guidance_scale: float) -> np.ndarray:
    b = x.shape[0]
    instr, char = model.encode_contexts(cond.instr_ids, cond.char_ids)
    eps_c = model.predict_eps(x, np.full(b, t), cond.mask, cond.masked_image,
                              instr, char).data
    if guidance_scale == 1.0:
        return eps_c
    n_instr, n_char = model.null_contexts(b, 1)
    eps_u = model.predict_eps(x, np.full(b, t), cond.mask, cond.masked_image,
                              n_instr, n_char if model.config.char_branch_enabled
                              else None).data
    return eps_u + guidance_scale * (eps_c - eps_u)


def _reimpose(x: np.ndarray, t: int, cond: Conditioning, known_x0: np.ndarray,
              schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Replace pixels outside the mask with the (noised) known image at level t."""
    if t == 0:
        known = known_x0
    else:
        eps = rng.standard_normal(known_x0.shape).astype(known_x0.dtype)
        known = q_sample(known_x0, t, schedule.alphabar, eps)
    return cond.mask * x + (1.0 - cond.mask) * known


def ddpm_sample(model: Denoiser, cond: Conditioning, schedule: NoiseSchedule,
                rng: np.random.Generator, guidance_scale: float = 1.0) -> np.ndarray:
    """Ancestral sampling; returns x0 (B,3,H,W) in [-1,1], exact outside mask."""
    b = cond.mask.shape[0]
    shape = (b, 3) + cond.mask.shape[2:]
    known_x0 = cond.masked_image  # zero inside mask; exact outside
    with no_grad():
        x = rng.standard_normal(shape).astype(np.float32)
        for t in range(schedule.T, 0, -1):
            eps_hat = _guided_eps(model, x, t, cond, guidance_scale)
            ab, a, beta = schedule.alphabar[t], schedule.alpha[t], schedule.beta[t]
            mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
            if t > 1:
                z = rng.standard_normal(shape).astype(np.float32)
                x = mean + np.sqrt(beta) * z
            else:
                x = mean
            x = _reimpose(x, t - 1, cond, known_x0, schedule, rng)
        x = np.clip(x, -1.0, 1.0)
        return cond.mask * x + (1.0 - cond.mask) * known_x0


def ddim_timesteps(T: int, steps: int) -> list:
    if steps < 1:
        raise ConfigError(f"ddim steps must be >= 1, got {steps}")
    if steps > T:
        raise ConfigError(f"ddim steps {steps} exceeds schedule T={T}")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))
    return list(ts[::-1])


def ddim_sample(model: Denoiser, cond: Conditioning, schedule: NoiseSchedule,
                steps: int, guidance_scale: float = 1.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic eta=0 sampler on a strided timestep subsequence.

    rng is used only for the initial noise and outside-mask re-imposition."""
    if rng is None:
        rng = np.random.default_rng(0)
    b = cond.mask.shape[0]
    shape = (b, 3) + cond.mask.shape[2:]
    known_x0 = cond.masked_image
    ts = ddim_timesteps(schedule.T, steps)
    with no_grad():
        x = rng.standard_normal(shape).astype(np.float32)
        for i, t in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = _guided_eps(model, x, t, cond, guidance_scale)
            ab = schedule.alphabar[t]
            ab_next = schedule.alphabar[t_next]
            x0_pred = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
            x0_pred = np.clip(x0_pred, -1.0, 1.0)
            x = np.sqrt(ab_next) * x0_pred + np.sqrt(1.0 - ab_next) * eps_hat
            x = _reimpose(x, t_next, cond, known_x0, schedule, rng)
        x = np.clip(x, -1.0, 1.0)
        return cond.mask * x + (1.0 - cond.mask) * known_x0
