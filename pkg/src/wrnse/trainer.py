"""Training: block generation, the log-spectral cost, and the AdamW loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import frontend, manifest, room
from .audio import SAMPLE_RATE, Waveform, load_waveform
from .model import WRN, WrnConfig, make_checkpoint, read_checkpoint, restore_optimizer, save_checkpoint
from .synth import NOISE_KINDS, make_noise

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-8
HOP = 160
STREAMS = {"augment": 1, "init": 2, "batch": 3, "holdout": 4}


class TrainingError(RuntimeError):
    pass


def substream(seed, name, *extra):
    """Independent generator for a named purpose; adding draws elsewhere never shifts it."""
    return np.random.default_rng([int(seed), STREAMS[name], *[int(e) for e in extra]])


@dataclass
class TrainConfig:
    block_len: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 100
    eval_hold_out: float = 0.0
    time_scale: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.block_len < 3 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("block_len >= 3, batch_size >= 1 and max_steps >= 0 are required")
        if min(self.beta1, self.beta2) < 0 or max(self.beta1, self.beta2) >= 1 or self.eps <= 0:
            raise ValueError("betas must lie in [0, 1) and eps must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.eval_hold_out <= 0.5:
            raise ValueError("eval_hold_out must lie in [0, 0.5]")


# ---------------------------------------------------------------------------
# cost


def cost(enhanced, clean_logfft, floor=LOG_FLOOR):
    """Log-spectral MSE: squared log errors summed over frequency, averaged over frames.

    ``enhanced`` is a magnitude (Tensor or array) of shape ``(T, D)`` or
    ``(B, T, D)``; ``clean_logfft`` the matching clean log magnitude. Batches
    average over every frame of every block. Returns a scalar Tensor.
    """
    enhanced = enhanced if isinstance(enhanced, ad.Tensor) else ad.Tensor(enhanced)
    target = np.asarray(clean_logfft, dtype=np.float64)
    if enhanced.shape != target.shape:
        raise ValueError(f"cost shape mismatch: enhanced {enhanced.shape} vs clean {target.shape}")
    n_frames = int(np.prod(target.shape[:-1]))
    diff = ad.sub(ad.log_floor(enhanced, floor), target)
    return ad.mul(ad.tensor_sum(ad.square(diff)), 1.0 / n_frames)


# ---------------------------------------------------------------------------
# block construction


def alignment_shift(first_tap, hop=HOP):
    """Frames by which the corrupted signal lags the clean one."""
    return int(round(first_tap / hop))


def time_scale_rows(matrix, factor):
    """Linearly resample rows so the time axis is stretched by ``factor``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    T = matrix.shape[0]
    new_t = int(np.floor((T - 1) * factor)) + 1
    pos = np.arange(new_t) / factor
    lo = np.minimum(np.floor(pos).astype(int), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return matrix[lo] * (1 - w) + matrix[hi] * w


@dataclass
class Utterance:
    """Normalized noisy features and the time-aligned clean target."""

    features: np.ndarray
    target: np.ndarray
    uid: str = ""

    def __post_init__(self):
        if self.features.shape[0] != self.target.shape[0]:
            raise ValueError("features and target must have the same number of frames")

    @property
    def n_frames(self):
        return self.features.shape[0]


def prepare_pair(clean, noisy, first_tap=0, uid="", floor=LOG_FLOOR):
    """Features of ``noisy`` and the clean log spectrum shifted onto its frame grid."""
    block = frontend.extract_features(noisy)
    clean_log = frontend.clean_log_spectrum(clean, floor)
    shift = alignment_shift(first_tap)
    T = block.n_frames
    usable = min(T - shift, clean_log.shape[0])
    if usable <= 0:
        raise TrainingError(f"utterance {uid or '?'} too short for a {shift}-frame alignment shift")
    return Utterance(block.frames[shift:shift + usable], clean_log[:usable], uid)


def slice_block(utt, block_len, rng, scale=None):
    feats, target = utt.features, utt.target
    if scale is not None:
        feats, target = time_scale_rows(feats, scale), time_scale_rows(target, scale)
    T = feats.shape[0]
    if T < block_len:
        raise TrainingError(f"utterance {utt.uid or '?'} has {T} frames, fewer than block_len={block_len}")
    start = int(rng.integers(0, T - block_len + 1))
    return feats[start:start + block_len], target[start:start + block_len]


class NoiseBank:
    """Noise signals drawn per block: user WAVs if given, else synthesized kinds."""

    def __init__(self, noise_dir="", seconds=8.0, seed=0):
        self.items = []
        if noise_dir:
            for p in sorted(Path(noise_dir).glob("*.wav")):
                self.items.append((p.stem, load_waveform(p).samples))
        if not self.items:
            rng = np.random.default_rng([seed, 99])
            n = int(seconds * SAMPLE_RATE)
            self.items = [(kind, make_noise(kind, n, rng)) for kind in NOISE_KINDS]

    def draw(self, rng):
        name, samples = self.items[int(rng.integers(len(self.items)))]
        return name, samples


def corrupt_utterance(clean, rng, noise_bank, room_class=None, snr_db=None):
    """Reverberate and add noise as in the augmentation recipe; returns ``(noisy, info)``."""
    room_class = room_class or str(rng.choice(sorted(room.ROOM_CLASSES)))
    spec = room.sample_room(room_class, rng)
    rir = room.image_source_rir(spec)
    snr = float(rng.uniform(10.0, 20.0)) if snr_db is None else float(snr_db)
    noise_id, noise = noise_bank.draw(rng)
    mix = room.mix_components(clean, rir, noise, room.MixSpec(snr, noise_id), rng)
    info = {"room": spec.as_dict(), "snr_db": snr, "noise": noise_id, "first_tap": rir.first_tap,
            "peak_gain": mix.peak_gain}
    return Waveform(mix.noisy), info


def make_training_block(clean, rng, noise_bank=None, block_len=200, time_scale=True, rir=None, snr_db=None):
    """One ``(features, target)`` pair of ``block_len`` frames from a clean utterance.

    With ``rir`` given it is used directly (``snr_db=None`` then means no
    noise); otherwise a room, RIR, noise and SNR are sampled.
    """
    if rir is None:
        noisy, info = corrupt_utterance(clean, rng, noise_bank or NoiseBank())
    else:
        rev = room.reverberate(clean, rir)
        if snr_db is None:
            noisy = Waveform(rev)
        else:
            _, noise = (noise_bank or NoiseBank()).draw(rng)
            noisy = Waveform(room.mix_components(clean, rir, noise, room.MixSpec(snr_db), rng).noisy)
        info = {"first_tap": rir.first_tap if isinstance(rir, room.Rir) else int(np.argmax(np.abs(rir)))}
    # the clean target carries the same peak-normalization gain as the mixture
    gain = info.get("peak_gain", 1.0)
    target_wave = Waveform(clean.samples * gain) if gain != 1.0 else clean
    utt = prepare_pair(target_wave, noisy, info["first_tap"])
    scale = float(rng.uniform(0.9, 1.1)) if time_scale else None
    feats, target = slice_block(utt, block_len, rng, scale)
    return feats, target, info


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: WRN
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    skipped: int = 0
    step: int = 0


class Trainer:
    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.optimizer = ad.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                                  eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.step_count = 0

    def step(self, features, targets):
        """One AdamW update on a batch ``(B, T, C)`` -> returns the batch cost."""
        self.model.train()
        self.optimizer.zero_grad()
        loss = cost(self.model(features, training=True), targets)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError("non-finite loss")
        ad.backward(loss)
        self.optimizer.step()
        self.step_count += 1
        for name, p in self.model.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"parameter {name} became non-finite")
        return value

    def parameter_norm(self):
        return float(np.sqrt(sum(np.sum(p.data ** 2) for p in self.model.parameters())))


class Corpus:
    """Training material: precomputed pairs, or clean audio corrupted on the fly."""

    def __init__(self, records, noise_dir="", seed=0):
        self.records = list(records)
        if not self.records:
            raise TrainingError("corpus is empty")
        self.pairs = all(r.get("noisy") or r.get("corrupted") for r in self.records)
        self.noise_bank = None if self.pairs else NoiseBank(noise_dir, seed=seed)
        self._cache = {}
        self._clean = {}
        self.skipped = 0

    def uid(self, i):
        r = self.records[i]
        return str(r.get("id") or Path(r["clean"]).stem)

    def _utterance(self, i):
        if i not in self._cache:
            r = self.records[i]
            clean = load_waveform(r["clean"])
            noisy = load_waveform(r.get("noisy") or r["corrupted"])
            gain = float(r.get("peak_gain", 1.0))
            clean = Waveform(clean.samples * gain) if gain != 1.0 else clean
            self._cache[i] = prepare_pair(clean, noisy, int(r.get("first_tap", 0)), self.uid(i))
        return self._cache[i]

    def block(self, i, rng, cfg):
        if self.pairs:
            scale = float(rng.uniform(0.9, 1.1)) if cfg.time_scale else None
            return slice_block(self._utterance(i), cfg.block_len, rng, scale)
        if i not in self._clean:
            self._clean[i] = load_waveform(self.records[i]["clean"])
        feats, target, _ = make_training_block(self._clean[i], rng, self.noise_bank, cfg.block_len, cfg.time_scale)
        return feats, target


def split_holdout(n, fraction, seed):
    order = substream(seed, "holdout").permutation(n)
    k = int(round(n * fraction))
    return sorted(order[k:].tolist()), sorted(order[:k].tolist())


def train(records, cfg, model_config=None, out_dir=None, resume=None, noise_dir="", on_step=None, model=None):
    """Run AdamW training over ``records``; returns a :class:`TrainResult`.

    Batches are drawn from a per-step generator seeded by ``(seed, step)``, so
    a resumed run continues exactly where an uninterrupted one would be.
    Checkpoints go to ``out_dir`` every ``checkpoint_every`` steps and at the
    end, with a JSON-lines metrics log beside them.
    """
    model_config = model_config or WrnConfig()
    corpus = Corpus(records, noise_dir, cfg.seed)
    train_idx, _ = split_holdout(len(corpus.records), cfg.eval_hold_out, cfg.seed)
    if not train_idx:
        raise TrainingError("no training utterances left after hold-out")
    start = 0
    if model is None:
        model = WRN(model_config, substream(cfg.seed, "init"))
    trainer = Trainer(model, cfg)
    if resume is not None:
        ckpt = read_checkpoint(resume)
        model.load_state_dict(ckpt.tensors)
        restore_optimizer(trainer.optimizer, model, ckpt)
        start = trainer.step_count = ckpt.train_step
    result = TrainResult(model, step=start)
    out = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume else "w")
    t0 = time.perf_counter()
    try:
        for step in range(start + 1, cfg.max_steps + 1):
            rng = substream(cfg.seed, "batch", step)
            picks = [train_idx[int(j)] for j in rng.integers(0, len(train_idx), cfg.batch_size)]
            feats, targets = [], []
            for i in picks:
                try:
                    f, y = corpus.block(i, rng, cfg)
                except (TrainingError, frontend.FeatureError) as exc:
                    result.skipped += 1
                    log.warning("skipping %s: %s", corpus.uid(i), exc)
                    continue
                feats.append(f)
                targets.append(y)
            if not feats:
                raise TrainingError(f"step {step}: every utterance in the batch was skipped")
            try:
                value = trainer.step(np.stack(feats), np.stack(targets))
            except FloatingPointError as exc:
                diag = {"step": step, "batch": [corpus.uid(i) for i in picks],
                        "parameter_norm": trainer.parameter_norm(), "error": str(exc)}
                if out is not None:
                    (out / "diagnostic.json").write_text(json.dumps(diag, indent=2))
                raise TrainingError(f"non-finite training state at step {step}: {diag}") from exc
            result.losses.append(value)
            result.step = step
            if metrics_fh and (step % cfg.log_every == 0 or step == cfg.max_steps):
                metrics_fh.write(json.dumps({"step": step, "cost": value,
                                             "wall_time": round(time.perf_counter() - t0, 3)}) + "\n")
                metrics_fh.flush()
            if on_step is not None:
                on_step(step, value)
            if out is not None and (step % cfg.checkpoint_every == 0 or step == cfg.max_steps):
                name = "final.wrn" if step == cfg.max_steps else f"step{step:07d}.wrn"
                path = save_checkpoint(make_checkpoint(model, step, cfg.seed, trainer.optimizer,
                                                       meta={"max_steps": cfg.max_steps}), out / name)
                result.checkpoints.append(path)
    finally:
        if metrics_fh:
            metrics_fh.close()
    result.skipped += corpus.skipped
    model.eval()
    return result


def train_from_config(values, resume=None):
    """Entry point used by the CLI: ``values`` come from :func:`wrnse.config.load`."""
    cfg = TrainConfig(**{k: values[k] for k in (
        "block_len", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "max_steps", "seed",
        "checkpoint_every", "eval_hold_out", "time_scale", "log_every")})
    mcfg = WrnConfig(base_widths=values["base_widths"], widen_factor=values["widen_factor"],
                     blocks_per_wrb=values["blocks_per_wrb"])
    records = manifest.read(values["manifest"])
    return train(records, cfg, mcfg, values["out_dir"], resume, values.get("noise_dir", ""))
