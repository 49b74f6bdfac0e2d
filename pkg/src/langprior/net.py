"""A small two-branch classifier with hand-written backprop.

Architecture (all activations ReLU)::

    h_q = relu(W_qe q + b_qe)          # question encoder
    h_v = relu(W_ve v + b_ve)          # visual encoder
    h_f = relu(W_f [h_q; h_v] + b_f)   # fusion
    p   = W_p h_f + b_p                # classifier logits
    m   = softplus_g(W_mask dropout(q))  # optional answer mask

Training is plain mini-batch SGD. With the mask enabled it is first trained
alone until its loss plateaus, then everything is optimized jointly on the
classification loss (optionally re-scaled) plus the mask loss.
"""

from __future__ import annotations

import base64
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Union

import numpy as np

from langprior import losses
from langprior.datagen import Dataset
from langprior.mask import (
    MaskParams,
    apply_mask,
    log_softplus_g,
    mask_loss,
    mask_preactivation,
    softplus_g,
)
from langprior.rescale import WeightTable
from langprior.vocab import TypeCountTable

GROUPS = ("q_encoder", "v_encoder", "fusion", "classifier", "mask")
LOSS_KINDS = ("sigm_bce", "soft_ce", "focal")


class TrainingDivergence(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    loss_kind: str = "soft_ce"
    use_rescale: bool = False
    use_mask: bool = False
    lr: float = 0.05
    mask_lr: float | None = 1.0
    epochs_mask_pretrain: Union[int, str] = "until-converged"
    mask_patience: int = 3
    mask_min_improvement: float = 1e-3
    mask_max_epochs: int = 50
    epochs_finetune: int = 10
    batch_size: int = 32
    seed: int = 0
    h_q: int = 16
    h_v: int = 32
    h_f: int = 32
    dropout_rate: float = 0.0
    mask_alpha: float = 1.0
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    reduction: str = "mean"

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.mask_lr is not None and not self.mask_lr >= 0:
            raise ValueError("mask_lr must be non-negative")
        if self.epochs_finetune < 0:
            raise ValueError("epochs_finetune must be non-negative")
        pre = self.epochs_mask_pretrain
        if isinstance(pre, str):
            if pre != "until-converged":
                raise ValueError("epochs_mask_pretrain must be an int or 'until-converged'")
        elif pre < 0:
            raise ValueError("epochs_mask_pretrain must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.h_q, self.h_v, self.h_f) < 1:
            raise ValueError("hidden sizes must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    @classmethod
    def from_dict(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class ModelParams:
    """Parameter arrays by named group: ``groups[name][key]``.

    ``output`` is ``"softmax"`` or ``"sigmoid"``; the mask group is present
    only when the model was built with an answer mask.
    """

    groups: dict[str, dict[str, np.ndarray]]
    output: str = "softmax"
    mask_alpha: float = 1.0
    dropout_rate: float = 0.0

    @property
    def use_mask(self) -> bool:
        return "mask" in self.groups

    @property
    def mask(self) -> MaskParams | None:
        if not self.use_mask:
            return None
        return MaskParams(self.groups["mask"]["W"], self.dropout_rate, self.mask_alpha)

    @property
    def num_answers(self) -> int:
        return self.groups["classifier"]["W"].shape[0]

    @property
    def q_dim(self) -> int:
        return self.groups["q_encoder"]["W"].shape[1]

    @property
    def v_dim(self) -> int:
        return self.groups["v_encoder"]["W"].shape[1]

    def copy(self) -> ModelParams:
        groups = {g: {k: a.copy() for k, a in d.items()} for g, d in self.groups.items()}
        return ModelParams(groups, self.output, self.mask_alpha, self.dropout_rate)

    def check(self) -> None:
        g = self.groups
        hq, qd = g["q_encoder"]["W"].shape
        hv, vd = g["v_encoder"]["W"].shape
        hf, fin = g["fusion"]["W"].shape
        na, cin = g["classifier"]["W"].shape
        ok = (
            fin == hq + hv
            and cin == hf
            and g["q_encoder"]["b"].shape == (hq,)
            and g["v_encoder"]["b"].shape == (hv,)
            and g["fusion"]["b"].shape == (hf,)
            and g["classifier"]["b"].shape == (na,)
        )
        if self.use_mask:
            ok = ok and g["mask"]["W"].shape == (na, qd)
        if not ok:
            raise ValueError("inconsistent parameter shapes")
        for name, d in g.items():
            for k, a in d.items():
                if not np.all(np.isfinite(a)):
                    raise ValueError(f"non-finite values in {name}.{k}")

    def to_json(self, answers=None, types=None) -> dict:
        arrays = {}
        for name, d in self.groups.items():
            arrays[name] = {
                k: {
                    "shape": list(a.shape),
                    "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode(),
                }
                for k, a in sorted(d.items())
            }
        out = {
            "format": "langprior-checkpoint/1",
            "output": self.output,
            "mask_alpha": self.mask_alpha,
            "dropout_rate": self.dropout_rate,
            "groups": arrays,
        }
        if answers is not None:
            out["answers"] = list(answers)
        if types is not None:
            out["types"] = list(types)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> ModelParams:
        groups = {}
        for name, d in obj["groups"].items():
            if name not in GROUPS:
                raise ValueError(f"unknown parameter group {name!r}")
            groups[name] = {
                k: np.frombuffer(base64.b64decode(e["data"]), dtype="<f8")
                .astype(np.float64)
                .reshape(e["shape"])
                for k, e in d.items()
            }
        p = cls(groups, obj["output"], obj.get("mask_alpha", 1.0), obj.get("dropout_rate", 0.0))
        p.check()
        return p


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    q_dim: int,
    v_dim: int,
    num_answers: int,
    config: TrainConfig,
) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) initialization from ``config.seed``."""
    rng = np.random.default_rng([config.seed, 10])
    layers = {
        "q_encoder": (config.h_q, q_dim),
        "v_encoder": (config.h_v, v_dim),
        "fusion": (config.h_f, config.h_q + config.h_v),
        "classifier": (num_answers, config.h_f),
    }
    groups = {}
    for name, (out, fan_in) in layers.items():
        groups[name] = {
            "W": _uniform(rng, (out, fan_in), fan_in),
            "b": _uniform(rng, (out,), fan_in),
        }
    if config.use_mask:
        groups["mask"] = {"W": _uniform(rng, (num_answers, q_dim), q_dim)}
    output = "softmax" if config.loss_kind == "soft_ce" else "sigmoid"
    return ModelParams(groups, output, config.mask_alpha, config.dropout_rate)


@dataclass
class ForwardCache:
    q: np.ndarray
    v: np.ndarray
    hq_pre: np.ndarray
    hq: np.ndarray
    hv_pre: np.ndarray
    hv: np.ndarray
    hcat: np.ndarray
    hf_pre: np.ndarray
    hf: np.ndarray
    logits: np.ndarray
    z: np.ndarray | None = None
    m: np.ndarray | None = None
    q_mask: np.ndarray | None = None


def _relu(x):
    return np.maximum(x, 0.0)


def forward(q, v, params: ModelParams, training: bool = False, rng=None) -> ForwardCache:
    """Batched forward pass; ``q`` is (n, q_dim), ``v`` is (n, v_dim)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    g = params.groups
    if q.shape[1] != params.q_dim or v.shape[1] != params.v_dim or q.shape[0] != v.shape[0]:
        raise ValueError(
            f"batch shapes q{q.shape} v{v.shape} do not match model "
            f"(q_dim={params.q_dim}, v_dim={params.v_dim})"
        )
    hq_pre = q @ g["q_encoder"]["W"].T + g["q_encoder"]["b"]
    hq = _relu(hq_pre)
    hv_pre = v @ g["v_encoder"]["W"].T + g["v_encoder"]["b"]
    hv = _relu(hv_pre)
    hcat = np.concatenate([hq, hv], axis=1)
    hf_pre = hcat @ g["fusion"]["W"].T + g["fusion"]["b"]
    hf = _relu(hf_pre)
    logits = hf @ g["classifier"]["W"].T + g["classifier"]["b"]
    cache = ForwardCache(q, v, hq_pre, hq, hv_pre, hv, hcat, hf_pre, hf, logits)
    if params.use_mask:
        z, q_used = mask_preactivation(q, params.mask, training, rng)
        cache.z, cache.q_mask = z, q_used
        cache.m = softplus_g(z, params.mask_alpha)
    return cache


def backward(cache: ForwardCache, params: ModelParams, d_logits, d_mask_z=None) -> dict:
    """Chain rule from logit (and mask pre-activation) gradients to every group.

    Returns ``grads[group][key]`` with the same layout as ``params.groups``.
    """
    g = params.groups
    G = np.asarray(d_logits, dtype=np.float64)
    grads = {"classifier": {"W": G.T @ cache.hf, "b": G.sum(axis=0)}}
    d_hf = (G @ g["classifier"]["W"]) * (cache.hf_pre > 0)
    grads["fusion"] = {"W": d_hf.T @ cache.hcat, "b": d_hf.sum(axis=0)}
    d_cat = d_hf @ g["fusion"]["W"]
    hq = cache.hq.shape[1]
    d_hq = d_cat[:, :hq] * (cache.hq_pre > 0)
    d_hv = d_cat[:, hq:] * (cache.hv_pre > 0)
    grads["q_encoder"] = {"W": d_hq.T @ cache.q, "b": d_hq.sum(axis=0)}
    grads["v_encoder"] = {"W": d_hv.T @ cache.v, "b": d_hv.sum(axis=0)}
    if params.use_mask:
        if d_mask_z is None:
            grads["mask"] = {"W": np.zeros_like(g["mask"]["W"])}
        else:
            grads["mask"] = {"W": np.asarray(d_mask_z).T @ cache.q_mask}
    return grads


def group_norms(grads: dict) -> dict[str, float]:
    """L2 norm of each group's gradient; groups absent from ``grads`` get 0."""
    return {
        name: float(math.sqrt(sum(float(np.sum(a * a)) for a in grads[name].values())))
        if name in grads else 0.0
        for name in GROUPS
    }


def classification_logits(cache: ForwardCache) -> np.ndarray:
    """Logits the classification loss sees: the mask enters as ``+ log m``.

    For a softmax output this is exactly probabilities times mask, renormalized.
    """
    if cache.z is None:
        return cache.logits
    return cache.logits + log_softplus_g(cache.z)


def classification_loss(logits, scores, mu, config: TrainConfig) -> losses.LossGrad:
    if config.loss_kind == "soft_ce":
        return losses.soft_ce(logits, scores, mu)
    if config.loss_kind == "sigm_bce":
        return losses.sigm_bce(logits, scores, mu)
    return losses.focal(logits, scores, config.focal_alpha, config.focal_gamma)


@dataclass
class TrainingTrace:
    """One row per SGD iteration."""

    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def norms(self, group: str) -> np.ndarray:
        return np.array([r["norms"].get(group, 0.0) for r in self.rows])

    def epoch_means(self, key: str = "total", phase: int | None = None) -> np.ndarray:
        rows = [r for r in self.rows if phase is None or r["phase"] == phase]
        if not rows:
            return np.zeros(0)
        epochs = sorted({(r["phase"], r["epoch"]) for r in rows})
        return np.array([
            np.mean([r[key] for r in rows if (r["phase"], r["epoch"]) == e]) for e in epochs
        ])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "phase", "epoch", "total", "cls", "mask", *GROUPS])
            for r in self.rows:
                w.writerow([
                    r["iter"], r["phase"], r["epoch"],
                    repr(r["total"]), repr(r["cls"]), repr(r["mask"]),
                    *(repr(r["norms"].get(gname, 0.0)) for gname in GROUPS),
                ])

    @classmethod
    def read_csv(cls, path: str | Path) -> TrainingTrace:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append({
                    "iter": int(rec["iter"]),
                    "phase": int(rec["phase"]),
                    "epoch": int(rec["epoch"]),
                    "total": float(rec["total"]),
                    "cls": float(rec["cls"]),
                    "mask": float(rec["mask"]),
                    "norms": {gname: float(rec[gname]) for gname in GROUPS if gname in rec},
                })
        return cls(rows)


def _sgd(params: ModelParams, grads: dict, lr: float, mask_lr: float, only=None) -> None:
    for name, d in grads.items():
        if only is not None and name not in only:
            continue
        step = mask_lr if name == "mask" else lr
        for k, gk in d.items():
            params.groups[name][k] -= step * gk


def _mask_targets(type_ids, count_table: TypeCountTable) -> np.ndarray:
    return count_table.in_type()[type_ids].astype(np.float64)


def train(
    train_set: Dataset,
    config: TrainConfig,
    weight_table: WeightTable | None = None,
    count_table: TypeCountTable | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainingTrace]:
    """Train from ``params`` (fresh initialization if None).

    Phase 1 (mask only): fixed epochs, or until the epoch-mean mask loss has
    not improved by ``mask_min_improvement`` (relative) for ``mask_patience``
    epochs. Phase 2: ``epochs_finetune`` epochs on classification + mask loss.
    """
    config.validate()
    if config.use_rescale and weight_table is None:
        raise ValueError("use_rescale needs a weight table")
    if not config.use_rescale and weight_table is not None:
        raise ValueError("weight table given but use_rescale is off")
    if config.use_mask and count_table is None:
        raise ValueError("use_mask needs the training count table")
    if weight_table is not None and weight_table.mu.shape[1] != train_set.num_answers:
        raise ValueError("weight table does not match the answer vocabulary")
    if params is None:
        params = init_params(train_set.q.shape[1], train_set.v.shape[1], train_set.num_answers, config)
    else:
        params = params.copy()
    params.check()
    if params.use_mask != config.use_mask:
        raise ValueError("params and config disagree on the answer mask")

    mask_lr = config.lr if config.mask_lr is None else config.mask_lr
    shuffle_rng = np.random.default_rng([config.seed, 20])
    pretrain_rng = np.random.default_rng([config.seed, 21])
    drop_rng = np.random.default_rng([config.seed, 30])
    scores = train_set.scores
    mask_targets = _mask_targets(train_set.type_ids, count_table) if config.use_mask else None
    mu_all = weight_table.for_types(train_set.type_ids) if config.use_rescale else None
    trace = TrainingTrace()
    n = len(train_set)
    bs = config.batch_size
    it = 0

    def batches(rng):
        order = rng.permutation(n)
        for s in range(0, n, bs):
            yield order[s:s + bs]

    def record(phase, epoch, total, cls, mloss, grads):
        nonlocal it
        if not math.isfinite(total):
            raise TrainingDivergence(it, total)
        trace.rows.append({
            "iter": it, "phase": phase, "epoch": epoch,
            "total": total, "cls": cls, "mask": mloss, "norms": group_norms(grads),
        })
        it += 1

    if config.use_mask:
        mask = params.mask
        fixed = not isinstance(config.epochs_mask_pretrain, str)
        max_epochs = config.epochs_mask_pretrain if fixed else config.mask_max_epochs
        best, stale = math.inf, 0
        for epoch in range(max_epochs):
            epoch_losses = []
            for idx in batches(pretrain_rng):
                z, q_used = mask_preactivation(train_set.q[idx], mask, True, drop_rng)
                res = mask_loss(softplus_g(z, mask.alpha), mask_targets[idx], mask.alpha)
                ml, gz = losses.reduce_batch(res, config.reduction)
                grads = {gname: {k: np.zeros_like(a) for k, a in d.items()}
                         for gname, d in params.groups.items()}
                grads["mask"]["W"] = gz.T @ q_used
                record(1, epoch, ml, 0.0, ml, grads)
                _sgd(params, grads, config.lr, mask_lr, only=("mask",))
                epoch_losses.append(ml)
            if fixed:
                continue
            cur = float(np.mean(epoch_losses))
            if cur < best * (1.0 - config.mask_min_improvement):
                best, stale = cur, 0
            else:
                stale += 1
                if stale >= config.mask_patience:
                    break

    for epoch in range(config.epochs_finetune):
        for idx in batches(shuffle_rng):
            cache = forward(train_set.q[idx], train_set.v[idx], params, True, drop_rng)
            mu = mu_all[idx] if mu_all is not None else None
            res = classification_loss(classification_logits(cache), scores[idx], mu, config)
            cls, d_logits = losses.reduce_batch(res, config.reduction)
            mloss, gz = 0.0, None
            if config.use_mask:
                mres = mask_loss(cache.m, mask_targets[idx], params.mask_alpha)
                mloss, gz = losses.reduce_batch(mres, config.reduction)
            # the mask is trained by its own loss only; no classification gradient reaches it
            grads = backward(cache, params, d_logits, gz)
            record(2, epoch, cls + mloss, cls, mloss, grads)
            _sgd(params, grads, config.lr, mask_lr)
    return params, trace


def predict_proba(q, v, params: ModelParams) -> np.ndarray:
    """Output probabilities, multiplied by the mask when the model has one."""
    cache = forward(q, v, params, training=False)
    if params.output == "softmax":
        probs = np.exp(losses.log_softmax(cache.logits))
    else:
        probs = losses.sigmoid(cache.logits)
    if cache.m is not None:
        probs = apply_mask(probs, cache.m)
    return probs


def predict_batch(q, v, params: ModelParams) -> np.ndarray:
    """Argmax answer per row; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(predict_proba(q, v, params), axis=1)


def predict(instance, params: ModelParams) -> int:
    return int(predict_batch(instance.q_feat[None, :], instance.v_feat[None, :], params)[0])


def save_checkpoint(path, params: ModelParams, answers=None, types=None, config: TrainConfig | None = None) -> None:
    obj = params.to_json(answers, types)
    if config is not None:
        obj["train_config"] = asdict(config)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    obj = json.loads(Path(path).read_text())
    return ModelParams.from_json(obj), obj
