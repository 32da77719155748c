"""Two-phase training: the TTS encoder first, then residual encoder + VC decoder."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import yaml
from torch import nn

from .checkpoint import load_checkpoint, parameter_digest, save_checkpoint
from .data import BatchPlan, Example, derive_seed, pad_ids, pad_mels, symbols_for
from .errors import TrainingDivergedError, ValidationError
from .features import ResidualConfig, ResidualEncoder
from .text import DEFAULT_TABLE, SymbolTable, tokenize
from .tts import Cotatron, CotatronConfig, cotatron_loss, per_item_mse
from .vc_decoder import VCDecoder, VCDecoderConfig, decoder_input, reconstruction_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "cotatron"
    batch_size: int = 64
    lr_initial: float = 3e-4
    lr_final: float = 1.5e-5
    decay_start_step: int = 25_000
    decay_end_step: int = 50_000
    weight_decay: float = 1e-6
    grad_clip: float | None = 1.0
    tf_rate: float = 0.5
    seed: int = 0
    max_steps: int | None = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    mix_prob: float = 0.5
    id_weight: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 1000
    val_every: int = 1000
    plateau_patience: int = 5

    def __post_init__(self):
        if self.phase not in ("cotatron", "vc"):
            raise ValidationError(f"phase must be 'cotatron' or 'vc', got {self.phase!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (self.lr_initial > 0 and self.lr_final > 0):
            raise ValidationError("learning rates must be positive")
        if self.decay_start_step > self.decay_end_step:
            raise ValidationError("decay_start_step must not exceed decay_end_step")
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        if phase == "vc":
            base = dict(phase="vc", batch_size=128, lr_initial=3e-4, lr_final=3e-4,
                        decay_start_step=0, decay_end_step=0, grad_clip=None, tf_rate=1.0)
        else:
            base = dict(phase="cotatron")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Constant, then geometric interpolation from lr_initial to lr_final, then constant."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    start, end = cfg.decay_start_step, cfg.decay_end_step
    if step <= start:
        return cfg.lr_initial
    if step >= end:
        return cfg.lr_final
    frac = (step - start) / (end - start)
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac


def _global_norm(params) -> float:
    norms = [p.grad.detach().norm(2) for p in params if p.grad is not None]
    return float(torch.norm(torch.stack(norms), 2)) if norms else 0.0


class _JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


class _Trainer:
    kind = ""

    def __init__(self, cfg: TrainConfig, examples: Sequence[Example], speakers: Sequence[str],
                 val_examples: Sequence[Example] = (), out_dir=None, lexicon=None,
                 table: SymbolTable = DEFAULT_TABLE):
        if not examples:
            raise ValidationError("no training examples")
        self.cfg = cfg
        self.examples = list(examples)
        self.val_examples = list(val_examples)
        self.speakers = list(speakers)
        self.lexicon = lexicon
        self.table = table
        self.out_dir = Path(out_dir) if out_dir else None
        self.log = _JsonlLog(self.out_dir / "train_log.jsonl" if self.out_dir else None)
        self.plan = BatchPlan([e.n_frames for e in self.examples], cfg.batch_size, cfg.seed)
        self.step_count = 0
        self.history: list[dict] = []
        self._t0 = time.perf_counter()

    # subclasses provide: trainable(), _batch_loss(idx, step), modules_for_ckpt()
    def _make_optimizer(self):
        self.optimizer = torch.optim.Adam(self.trainable(), lr=self.cfg.lr_initial,
                                          betas=self.cfg.adam_betas, eps=self.cfg.adam_eps,
                                          weight_decay=self.cfg.weight_decay)

    def texts(self, idx: Sequence[int], epoch: int):
        return [symbols_for(self.examples[i], epoch, self.cfg.seed, self.lexicon,
                            self.cfg.mix_prob, self.table) for i in idx]

    def step(self) -> dict:
        step = self.step_count
        idx = self.plan.batch(step)
        lr = lr_schedule(step, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        torch.manual_seed(derive_seed(self.cfg.seed, "dropout", step))
        self.train_mode()
        self.optimizer.zero_grad(set_to_none=True)
        loss, parts = self._batch_loss(idx, step)
        if not math.isfinite(loss.item()):
            self._diverged(step, idx, parts)
        loss.backward()
        params = self.trainable()
        grad_norm = _global_norm(params)
        clipped = grad_norm
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
            clipped = _global_norm(params)
        if not math.isfinite(grad_norm):
            self._diverged(step, idx, parts)
        self.optimizer.step()
        self.step_count += 1
        record = {"step": self.step_count, "lr": lr, **parts, "grad_norm": grad_norm,
                  "grad_norm_clipped": clipped, "wallclock": time.perf_counter() - self._t0}
        self.history.append(record)
        if self.step_count % self.cfg.log_every == 0:
            self.log.write(record)
        return record

    def _diverged(self, step, idx, parts):
        keys = [self.examples[i].key for i in idx]
        dump = None
        if self.out_dir is not None:
            dump = self.out_dir / f"diverged_step{step}.json"
            dump.write_text(json.dumps({"step": step, "batch_ids": keys, "parts": parts}, indent=2))
        raise TrainingDivergedError(step, keys, dump)

    def fit(self, n_steps: int | None = None, until_plateau: bool = False) -> list[dict]:
        n_steps = n_steps if n_steps is not None else self.cfg.max_steps
        if n_steps is None and not until_plateau:
            raise ValidationError("either n_steps/max_steps or until_plateau is required")
        best, since_best = math.inf, 0
        done = 0
        while n_steps is None or done < n_steps:
            self.step()
            done += 1
            if self.out_dir and self.step_count % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"{self.kind}_step{self.step_count}.pt")
            if self.val_examples and self.step_count % self.cfg.val_every == 0:
                v = self.validate()
                self.log.write({"step": self.step_count, "val_loss": v})
                if v < best - 1e-6:
                    best, since_best = v, 0
                else:
                    since_best += 1
                if until_plateau and since_best >= self.cfg.plateau_patience:
                    break
        return self.history

    def save(self, path) -> Path:
        return save_checkpoint(path, kind=self.kind, params=self.params(),
                               model_config=self.model_config(), table=self.table,
                               speakers=self.speakers, step=self.step_count,
                               train_config=self.cfg.to_dict(),
                               optimizer=self.optimizer.state_dict(), extra=self.extra())

    def extra(self) -> dict:
        return {}


# --- phase 1: TTS encoder -----------------------------------------------------------

class CotatronTrainer(_Trainer):
    kind = "cotatron"

    def __init__(self, model: Cotatron, cfg: TrainConfig, examples, speakers, **kw):
        super().__init__(cfg, examples, speakers, **kw)
        self.model = model
        self._make_optimizer()

    def trainable(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def train_mode(self):
        self.model.train()

    def _batch(self, idx, epoch, dtype):
        mel, ml = pad_mels([self.examples[i].mel for i in idx], dtype)
        ids, tl = pad_ids(self.texts(idx, epoch))
        labels = torch.tensor([self.examples[i].speaker for i in idx])
        return mel, ml, ids, tl, labels

    def _batch_loss(self, idx, step):
        dtype = next(self.model.parameters()).dtype
        mel, ml, ids, tl, labels = self._batch(idx, self.plan.epoch_of(step), dtype)
        gen = torch.Generator().manual_seed(derive_seed(self.cfg.seed, "tf", step))
        out = self.model(mel, ml, ids, tl, tf_rate=self.cfg.tf_rate, generator=gen)
        return cotatron_loss(out, mel, labels, ml, self.cfg.id_weight)

    @torch.no_grad()
    def validate(self) -> float:
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        total = 0.0
        for ex in self.val_examples:
            mel, ml = pad_mels([ex.mel], dtype)
            ids, tl = pad_ids([tokenize(ex.transcript, self.table)])
            out = self.model(mel, ml, ids, tl, tf_rate=1.0)
            # the speaker head only knows training speakers; score the mel terms
            total += (per_item_mse(out.mel_pre, mel, ml) + per_item_mse(out.mel_post, mel, ml)).item()
        return total / len(self.val_examples)

    def params(self):
        return self.model.state_dict()

    def model_config(self):
        return self.model.cfg.to_dict()

    def load_state(self, payload: dict) -> None:
        self.model.load_state_dict(payload["params"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.step_count = int(payload["step"])

    @classmethod
    def resume(cls, path, examples, speakers=None, **kw) -> "CotatronTrainer":
        payload = load_checkpoint(path, "cotatron")
        model = Cotatron(CotatronConfig.from_dict(payload["model_config"]))
        cfg = TrainConfig.from_dict(payload["train_config"])
        trainer = cls(model, cfg, examples, speakers or payload["speakers"],
                      table=SymbolTable.from_json(payload["symbols"]), **kw)
        trainer.load_state(payload)
        return trainer


def load_cotatron(path) -> tuple[Cotatron, dict]:
    payload = load_checkpoint(path, "cotatron")
    model = Cotatron(CotatronConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload


def train_cotatron(stage1: Sequence[Example], stage2: Sequence[Example] | None, cfg: TrainConfig,
                   model_cfg: CotatronConfig, speakers: Sequence[str], out_dir=None,
                   val_examples: Sequence[Example] = (), lexicon=None,
                   phase2_steps: int | None = None) -> tuple[Cotatron, Path | None, list[dict]]:
    """Phase 1 on ``stage1``; if ``stage2`` is given, continue on the union with a fresh schedule.

    Each phase runs ``cfg.max_steps`` steps, or until validation loss plateaus
    when ``max_steps`` is None.
    """
    torch.manual_seed(cfg.seed)
    model = Cotatron(replace(model_cfg, n_speakers=len(speakers)))
    out = Path(out_dir) if out_dir else None
    trainer = CotatronTrainer(model, cfg, stage1, speakers, val_examples=val_examples,
                              out_dir=out / "phase1" if out else None, lexicon=lexicon)
    history = trainer.fit(cfg.max_steps, until_plateau=cfg.max_steps is None)
    if stage2:
        union = list(stage1) + [e for e in stage2 if e.key not in {x.key for x in stage1}]
        trainer = CotatronTrainer(model, replace(cfg, seed=derive_seed(cfg.seed, "phase2") % (2**31)),
                                  union, speakers, val_examples=val_examples,
                                  out_dir=out / "phase2" if out else None, lexicon=lexicon)
        steps = phase2_steps if phase2_steps is not None else cfg.max_steps
        history += trainer.fit(steps, until_plateau=steps is None)
    path = trainer.save(out / "cotatron.pt") if out else None
    return model, path, history


# --- phase 2: residual encoder + VC decoder ----------------------------------------------

class VCSystem(nn.Module):
    """Trainable half of the conversion model: residual encoder and VC decoder."""

    def __init__(self, residual_cfg: ResidualConfig, decoder_cfg: VCDecoderConfig):
        super().__init__()
        self.residual = ResidualEncoder(residual_cfg)
        self.decoder = VCDecoder(decoder_cfg)

    def forward(self, linguistic, mel, lengths, speaker_ids):
        r = self.residual(mel, lengths)
        return self.decoder(decoder_input(linguistic, r), lengths, speaker_ids)


class VCTrainer(_Trainer):
    kind = "vc"

    def __init__(self, cotatron: Cotatron, system: VCSystem, cfg: TrainConfig, examples, speakers,
                 cotatron_digest: str | None = None, **kw):
        super().__init__(cfg, examples, speakers, **kw)
        self.cotatron = cotatron.eval()
        for p in self.cotatron.parameters():
            p.requires_grad_(False)
        self.cotatron_digest = cotatron_digest or parameter_digest(cotatron)
        self.system = system
        self._features: dict[tuple, torch.Tensor] = {}
        self._make_optimizer()

    def trainable(self):
        return [p for p in self.system.parameters() if p.requires_grad]

    def train_mode(self):
        self.cotatron.eval()
        self.system.train()

    @torch.no_grad()
    def linguistic(self, ex: Example, seq) -> torch.Tensor:
        key = (ex.key, seq.ids)
        if key not in self._features:
            dtype = next(self.cotatron.parameters()).dtype
            mel, ml = pad_mels([ex.mel], dtype)
            ids, tl = pad_ids([seq])
            out = self.cotatron(mel, ml, ids, tl, tf_rate=1.0)
            self._features[key] = torch.matmul(out.alignment, out.text_encoding)[0]
        return self._features[key]

    def batch_tensors(self, idx, epoch):
        dtype = next(self.system.parameters()).dtype
        exs = [self.examples[i] for i in idx]
        seqs = self.texts(idx, epoch)
        mel, ml = pad_mels([e.mel for e in exs], dtype)
        feats = [self.linguistic(e, s) for e, s in zip(exs, seqs)]
        lf = torch.zeros(len(exs), mel.shape[1], feats[0].shape[-1], dtype=dtype)
        for i, f in enumerate(feats):
            lf[i, : f.shape[0]] = f.to(dtype)
        spk = torch.tensor([e.speaker for e in exs])
        return lf, mel, ml, spk

    def _batch_loss(self, idx, step):
        lf, mel, ml, spk = self.batch_tensors(idx, self.plan.epoch_of(step))
        pred = self.system(lf, mel, ml, spk)
        loss = reconstruction_loss(pred, mel, ml)
        return loss, {"recon": loss.item(), "total": loss.item()}

    @torch.no_grad()
    def per_item_losses(self, idx, epoch: int = 0) -> torch.Tensor:
        lf, mel, ml, spk = self.batch_tensors(idx, epoch)
        return per_item_mse(self.system(lf, mel, ml, spk), mel, ml)

    @torch.no_grad()
    def validate(self) -> float:
        self.system.eval()
        total = 0.0
        dtype = next(self.system.parameters()).dtype
        for ex in self.val_examples:
            lf = self.linguistic(ex, tokenize(ex.transcript, self.table)).unsqueeze(0).to(dtype)
            mel, ml = pad_mels([ex.mel], dtype)
            total += reconstruction_loss(self.system(lf, mel, ml, torch.tensor([ex.speaker])), mel).item()
        return total / len(self.val_examples)

    def params(self):
        return self.system.state_dict()

    def model_config(self):
        return {"residual": self.system.residual.cfg.to_dict(),
                "decoder": self.system.decoder.cfg.to_dict()}

    def extra(self):
        return {"cotatron_digest": self.cotatron_digest}

    def load_state(self, payload: dict) -> None:
        self.system.load_state_dict(payload["params"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.step_count = int(payload["step"])


def load_vc(path) -> tuple[VCSystem, dict]:
    payload = load_checkpoint(path, "vc")
    mc = payload["model_config"]
    system = VCSystem(ResidualConfig.from_dict(mc["residual"]), VCDecoderConfig.from_dict(mc["decoder"]))
    system.load_state_dict(payload["params"])
    system.eval()
    return system, payload


def train_vc(examples: Sequence[Example], cotatron: Cotatron, cfg: TrainConfig, speakers: Sequence[str],
             decoder_cfg: VCDecoderConfig | None = None, residual_cfg: ResidualConfig | None = None,
             out_dir=None, val_examples: Sequence[Example] = (), lexicon=None,
             ) -> tuple[VCSystem, Path | None, list[dict], VCTrainer]:
    """Optimize residual encoder + VC decoder + speaker table on reconstruction; the encoder stays frozen."""
    torch.manual_seed(cfg.seed)
    decoder_cfg = replace(decoder_cfg or VCDecoderConfig(text_dim=cotatron.cfg.encoder_dim),
                          n_speakers=len(speakers), text_dim=cotatron.cfg.encoder_dim)
    residual_cfg = residual_cfg or ResidualConfig(n_mels=cotatron.cfg.n_mels)
    system = VCSystem(residual_cfg, decoder_cfg)
    trainer = VCTrainer(cotatron, system, cfg, examples, speakers, val_examples=val_examples,
                        out_dir=out_dir, lexicon=lexicon)
    history = trainer.fit(cfg.max_steps, until_plateau=cfg.max_steps is None)
    path = trainer.save(Path(out_dir) / "vc.pt") if out_dir else None
    return system, path, history, trainer


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")
