"""Two-phase optimization: joint training, then classifier finetuning on
generated features, alternating every ``alternation_period`` iterations
after a warmup. The discriminator is updated first in each step (on
detached features), then the minimization step runs against the updated
discriminator. E and CM are frozen throughout finetuning phases.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tape, Tensor, backward, sgd_step
from .constants import IGNORE
from .errors import ConfigError, ContractError, ParseError
from .metrics import MetricReport, evaluate_model
from .network import Model, save_checkpoint, variant_config
from .rng import RngState
from .synthetic import (Corpus, WordEmbeddingTable, downsample_labels,
                        upsample_nearest)

TRAIN, FINETUNE = "train", "finetune"
FEATURE_STRIDE = 4  # backbone output stride


@dataclass
class TrainConfig:
    lambda1: float = 10.0
    lambda2: float = 100.0
    ratio_seen: float = 1.0
    ratio_unseen: float = 1.0
    base_lr: float = 2.5e-4
    plateau_patience: int = 200
    plateau_factor: float = 0.1
    warmup_iters: int = 1000
    alternation_period: int = 100
    total_iters: int = 1400
    batch_size: int = 4
    seed: int = 7
    variant: str = "full"
    feat_width: int = 64
    hidden: int = 512
    no_kl: bool = False
    no_adv: bool = False
    no_rec: bool = False
    eps_per_channel: bool = False
    eval_every: int = 0
    checkpoint_every: int = 0
    self_train_rounds: int = 0
    self_train_threshold: float = 0.9
    self_train_steps: int = 200

    @property
    def ratio(self):
        return (self.ratio_seen, self.ratio_unseen)

    def validate(self):
        if self.alternation_period < 1:
            raise ConfigError("alternation_period must be >= 1")
        if self.ratio_seen < 0 or self.ratio_unseen < 0 or \
                self.ratio_seen + self.ratio_unseen == 0:
            raise ConfigError("ratio components must be >= 0 and not both 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ConfigError("batch_size/total_iters out of range")
        variant_config(self.variant)  # raises on unknown names

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for fld in fields(self):
                f.write(f"{fld.name}={getattr(self, fld.name)}\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        cfg = cls()
        kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(cls)}
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        updates = {}
        for lineno, raw in enumerate(lines, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{k}'")
            kind = kinds[k]
            if kind is bool:
                if v not in ("True", "False", "true", "false", "0", "1"):
                    raise ParseError(f"{path}:{lineno}: bad boolean '{v}'")
                updates[k] = v in ("True", "true", "1")
            else:
                updates[k] = kind(v)
        cfg = replace(cfg, **updates)
        cfg.validate()
        return cfg


def phase_of(iteration: int, cfg: TrainConfig) -> str:
    """Pure function of the iteration counter."""
    if iteration < cfg.warmup_iters:
        return TRAIN
    k = (iteration - cfg.warmup_iters) // cfg.alternation_period
    return FINETUNE if k % 2 == 0 else TRAIN


def build_embedding_map(table: WordEmbeddingTable, r, h: int, w: int,
                        rng: RngState):
    """Random pixel-wise embedding map for finetuning.

    Each pixel independently picks seen-vs-unseen with probability
    r_s/(r_s+r_u), then a uniform category within the chosen split.
    Returns (W: [1,d,h,w] float array, labels: [h,w] int array).
    """
    rs, ru = r
    if rs < 0 or ru < 0 or rs + ru == 0:
        raise ConfigError(f"invalid feature-generating ratio {r}")
    seen = np.asarray(table.seen_ids, dtype=np.int64)
    unseen = np.asarray(table.unseen_ids, dtype=np.int64)
    if rs > 0 and seen.size == 0:
        raise ConfigError("ratio draws seen pixels but the table has no seen ids")
    if ru > 0 and unseen.size == 0:
        raise ConfigError("ratio draws unseen pixels but the table has no unseen ids")
    p_seen = rs / (rs + ru)
    from_seen = np.asarray(rng.uniform(shape=(h, w))) < p_seen
    pick_seen = seen[rng.integers(0, max(seen.size, 1), (h, w))] if seen.size else 0
    pick_unseen = (unseen[rng.integers(0, max(unseen.size, 1), (h, w))]
                   if unseen.size else 0)
    labels = np.where(from_seen, pick_seen, pick_unseen).astype(np.int64)
    wmap = table.rows[labels].transpose(2, 0, 1)[None]
    return wmap, labels


class PlateauScheduler:
    """Divide the lr by 10 when the train-phase loss stops decreasing."""

    def __init__(self, base_lr: float, patience: int, factor: float):
        self.lr = base_lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.bad_steps = 0

    def observe(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                self.lr *= self.factor
                self.bad_steps = 0
        return self.lr


@dataclass
class RunResult:
    model: Model
    loss_rows: list
    metric_rows: list
    final_report: MetricReport | None


class Trainer:
    """Owns model state, RNG streams, and the optimization loop."""

    def __init__(self, corpus: Corpus, cfg: TrainConfig):
        cfg.validate()
        if not corpus.train:
            raise ContractError("corpus has no training samples")
        self.corpus = corpus
        self.cfg = cfg
        base_variant = variant_config(cfg.variant)
        if cfg.eps_per_channel:
            base_variant = replace(base_variant, eps_per_channel=True)
        self.model = Model(num_classes=corpus.num_categories,
                           embed_dim=corpus.embeddings.dim,
                           feat=cfg.feat_width, hidden=cfg.hidden,
                           variant=base_variant, seed=cfg.seed)
        root = RngState(cfg.seed)
        self.batch_rng = root.spawn("batches")
        self.step_rng = root.spawn("steps")  # eps, dropout, random latents
        self.ft_rng = root.spawn("finetune")  # embedding maps, blind latents
        self.embed_tensor = Tensor(corpus.embeddings.rows)
        self.schedule = PlateauScheduler(cfg.base_lr, cfg.plateau_patience,
                                         cfg.plateau_factor)
        self.iteration = 0
        self._order = []
        self._pos = 0

    # ---- batching ----------------------------------------------------------
    def next_batch(self):
        out = []
        n = len(self.corpus.train)
        for _ in range(self.cfg.batch_size):
            if self._pos >= len(self._order):
                self._order = list(np.asarray(self.batch_rng.permutation(n)))
                self._pos = 0
            out.append(self.corpus.train[self._order[self._pos]])
            self._pos += 1
        return out

    # ---- freeze management ---------------------------------------------------
    def _set_frozen_backbone_cm(self, frozen: bool):
        for p in self.model.e_params() + self.model.cm_params():
            if frozen:
                p.freeze()
            else:
                p.unfreeze()

    # ---- one training step ---------------------------------------------------
    def training_step(self, batch) -> L.LossReport | None:
        cfg, model = self.cfg, self.model
        self._set_frozen_backbone_cm(False)
        feat = model.feat

        imgs = Tensor(np.stack([s.image for s in batch]))
        y_cls = downsample_labels(
            np.stack([s.cls_labels() for s in batch]), FEATURE_STRIDE)
        y_rec = downsample_labels(
            np.stack([s.labels for s in batch]), FEATURE_STRIDE)
        if not (y_cls != IGNORE).any():
            warnings.warn("skipping batch with zero labeled pixels")
            return None
        rec_mask_np = y_rec != IGNORE
        use_g = model.generator is not None and rec_mask_np.any()
        use_d = use_g and model.variant.use_discriminator and not cfg.no_adv

        zero = Tensor(0.0)
        adv_d_value = 0.0
        with Tape() as tape:
            _, x, lat, _ = model.features(imgs, self.step_rng, train=True)
            x_fake = None
            rec_mask = None
            if use_g:
                n, _, h, w = x.shape
                if lat is not None:
                    z = lat.z
                else:  # no contextual module: blind per-pixel latent codes
                    z = Tensor(self.step_rng.normal((n, feat, h, w)))
                w_map = ad.gather_rows(self.embed_tensor,
                                       np.where(rec_mask_np, y_rec, 0))
                x_fake = model.generator.forward(z, w_map, self.step_rng, train=True)
                rec_mask = Tensor(rec_mask_np[:, None].astype(np.float64))

            if use_d:
                d_real = model.heads.discriminate(ad.detach(x))
                d_fake = model.heads.discriminate(ad.detach(x_fake))
                adv_d, _ = L.adv_losses(d_real, d_fake, rec_mask)
                backward(ad.neg(adv_d), tape)  # gradient ascent on D's objective
                sgd_step(model.d_own_params(), self.schedule.lr)
                model.zero_all_grads()
                adv_d_value = adv_d.item()

            cls = L.cls_loss(model.heads.classify(x), y_cls)
            rec = L.rec_loss(x, x_fake, rec_mask) if use_g else zero
            kl = L.kl_loss(lat.mu, lat.sigma) if lat is not None else zero
            if use_d:
                _, adv_g = L.adv_losses(None, model.heads.discriminate(x_fake),
                                        rec_mask)
            else:
                adv_g = zero
            total = L.train_objective(
                cls, adv_g,
                zero if cfg.no_rec else rec,
                zero if cfg.no_kl else kl,
                cfg.lambda1, cfg.lambda2)
            backward(total, tape)
            sgd_step(model.joint_params(), self.schedule.lr)
            model.zero_all_grads()
        model.apply_constraints()

        return L.LossReport(cls=cls.item(), adv_d=adv_d_value, adv_g=adv_g.item(),
                            rec=rec.item(), kl=kl.item(), total=total.item(),
                            pixel_count=int((y_cls != IGNORE).sum()))

    # ---- one finetuning step ---------------------------------------------------
    def finetuning_step(self) -> L.LossReport:
        cfg, model = self.cfg, self.model
        if model.generator is None:
            raise ContractError(f"variant '{cfg.variant}' has no generator to finetune")
        self._set_frozen_backbone_cm(True)
        n = cfg.batch_size
        h = w = self.corpus.image_size // FEATURE_STRIDE

        w_maps, y_maps = [], []
        for _ in range(n):
            wm, ym = build_embedding_map(self.corpus.embeddings, cfg.ratio, h, w,
                                         self.ft_rng)
            w_maps.append(wm)
            y_maps.append(ym)
        w_map = Tensor(np.concatenate(w_maps, axis=0))
        y = np.stack(y_maps)
        mask = Tensor(np.ones((n, 1, h, w)))
        use_d = model.variant.use_discriminator and not cfg.no_adv

        zero = Tensor(0.0)
        adv_d_value = 0.0
        with Tape() as tape:
            z = Tensor(self.ft_rng.normal((n, model.feat, h, w)))
            x_fake = model.generator.forward(z, w_map, self.ft_rng, train=True)
            if use_d:
                # real term deleted: no real features exist in this phase
                d_fake = model.heads.discriminate(ad.detach(x_fake))
                adv_d, _ = L.adv_losses(None, d_fake, mask)
                backward(ad.neg(adv_d), tape)
                sgd_step(model.d_own_params(), self.schedule.lr)
                model.zero_all_grads()
                adv_d_value = adv_d.item()

            cls = L.cls_loss(model.heads.classify(x_fake), y)
            if use_d:
                _, adv_g = L.adv_losses(None, model.heads.discriminate(x_fake), mask)
            else:
                adv_g = zero
            total = L.finetune_objective(cls, adv_g)
            backward(total, tape)
            sgd_step(model.finetune_params(), self.schedule.lr)
            model.zero_all_grads()
        model.apply_constraints()

        return L.LossReport(cls=cls.item(), adv_d=adv_d_value, adv_g=adv_g.item(),
                            rec=0.0, kl=0.0, total=total.item(),
                            pixel_count=y.size)

    # ---- self-training -----------------------------------------------------
    def self_training_round(self, threshold: float) -> int:
        """Tag confident unseen predictions on IGNOREd training pixels.

        Pseudo-labels only ever fill IGNORE pixels and only join the
        classification loss (never reconstruction). Returns #pixels tagged.
        """
        unseen = np.asarray(self.corpus.unseen_ids, dtype=np.int64)
        tagged = 0
        for sample in self.corpus.train:
            logits = self.model.segment_logits(sample.image)
            z = logits - logits.max(axis=0, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=0, keepdims=True)
            conf = probs.max(axis=0)
            pred = probs.argmax(axis=0)
            factor = sample.labels.shape[0] // pred.shape[0]
            pred_up = upsample_nearest(pred, factor)
            conf_up = upsample_nearest(conf, factor)
            take = ((sample.labels == IGNORE) & np.isin(pred_up, unseen)
                    & (conf_up >= threshold))
            pseudo = np.full_like(sample.labels, IGNORE)
            pseudo[take] = pred_up[take].astype(sample.labels.dtype)
            sample.pseudo = pseudo
            tagged += int(take.sum())
        return tagged

    # ---- full loop -----------------------------------------------------------
    def _step(self) -> tuple[str, L.LossReport | None]:
        phase = phase_of(self.iteration, self.cfg)
        if phase == FINETUNE and self.model.generator is None:
            phase = TRAIN  # module ablations without G never finetune
        if phase == TRAIN:
            report = self.training_step(self.next_batch())
            if report is not None:
                self.schedule.observe(report.total)
        else:
            report = self.finetuning_step()
        self.iteration += 1
        return phase, report

    def run(self, out_dir=None, progress=None) -> RunResult:
        cfg = self.cfg
        loss_rows = [L.LossReport.CSV_HEADER]
        metric_rows = [MetricReport.CSV_HEADER]
        loss_f = metric_f = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            loss_f = open(os.path.join(out_dir, "losses.csv"), "w")
            metric_f = open(os.path.join(out_dir, "metrics.csv"), "w")
            loss_f.write(loss_rows[0] + "\n")
            metric_f.write(metric_rows[0] + "\n")
        final_report = None
        try:
            steps_left = cfg.total_iters
            while steps_left > 0:
                it = self.iteration
                phase, report = self._step()
                steps_left -= 1
                if report is not None:
                    row = report.csv_row(it, phase)
                    loss_rows.append(row)
                    if loss_f:
                        loss_f.write(row + "\n")
                if progress and (it + 1) % progress == 0:
                    print(f"iter {it + 1}/{cfg.total_iters} phase={phase} "
                          f"lr={self.schedule.lr:.2e}", flush=True)
                if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                    rep, _ = evaluate_model(self.model, self.corpus.test,
                                            self.corpus.seen_ids,
                                            self.corpus.unseen_ids)
                    metric_rows.append(rep.csv_row(it + 1, "test"))
                    if metric_f:
                        metric_f.write(metric_rows[-1] + "\n")
                if out_dir and cfg.checkpoint_every and \
                        (it + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(self.model, os.path.join(out_dir, "last.ckpt"))

            for round_idx in range(cfg.self_train_rounds):
                tagged = self.self_training_round(cfg.self_train_threshold)
                if progress:
                    print(f"self-training round {round_idx}: tagged {tagged} pixels",
                          flush=True)
                for _ in range(cfg.self_train_steps):
                    it = self.iteration
                    phase, report = self._step()
                    if report is not None:
                        row = report.csv_row(it, phase)
                        loss_rows.append(row)
                        if loss_f:
                            loss_f.write(row + "\n")

            if self.corpus.test:
                final_report, _ = evaluate_model(self.model, self.corpus.test,
                                                 self.corpus.seen_ids,
                                                 self.corpus.unseen_ids)
                metric_rows.append(final_report.csv_row(self.iteration, "test"))
                if metric_f:
                    metric_f.write(metric_rows[-1] + "\n")
            if out_dir:
                save_checkpoint(self.model, os.path.join(out_dir, "last.ckpt"))
        finally:
            if loss_f:
                loss_f.close()
            if metric_f:
                metric_f.close()
        return RunResult(model=self.model, loss_rows=loss_rows,
                         metric_rows=metric_rows, final_report=final_report)
