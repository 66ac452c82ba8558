"""Mini-batch SGD: learning-rate policies, the training loop, stage chaining.

Policies:
    fixed   lr = base_lr
    step    lr = base_lr * gamma ^ floor(iter / step_size)
    inv     lr = base_lr * (1 + gamma * iter) ^ (-power)

Batch order is a pure function of (shuffle_seed, iteration): each epoch is
one seeded permutation of the dataset, the trailing partial batch wraps
around to the epoch head.  That makes checkpoint resume trivially exact:
restart at the stored iteration and the remaining schedule of batches,
learning rates and losses is identical to an uninterrupted run.
"""
import configparser
import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment as aug
from . import data as dataio
from .errors import (
    ManifestError,
    NumericalDivergenceError,
    ShapeMismatchError,
    SpecValidationError,
)
from .model import (
    GroupSpec,
    NetworkSpec,
    backward,
    build_network,
    load_weights,
    save_weights,
)
from .nn import sgd_update

__all__ = [
    "LrPolicy", "StageSchedule", "TrainingLog", "ManifestDataset",
    "lr_at", "batch_indices", "train_stage", "run_three_stage",
    "default_stage_policy", "read_stage_config",
]

log = logging.getLogger(__name__)

_LR_KINDS = ("fixed", "step", "inv")
# Extended precision for the closed-form policy evaluation.  On x86 Linux
# this is the 80-bit type, which keeps the final float64 rounding within
# one ulp of the exact value.
_LD = np.longdouble


@dataclass(frozen=True)
class LrPolicy:
    kind: str
    base_lr: float
    gamma: float = 0.1
    step_size: int = 20000
    power: float = 0.75

    def __post_init__(self):
        if self.kind not in _LR_KINDS:
            raise SpecValidationError(
                f"unknown lr policy {self.kind!r}; expected one of {_LR_KINDS}")
        if not self.base_lr > 0:
            raise SpecValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.kind == "step" and self.step_size < 1:
            raise SpecValidationError(f"step policy needs step_size >= 1, "
                                      f"got {self.step_size}")
        if self.kind == "inv" and not self.power > 0:
            raise SpecValidationError(f"inv policy needs power > 0, got {self.power}")


def lr_at(policy, iteration):
    """Closed-form learning rate at a 0-based iteration."""
    if iteration < 0:
        raise SpecValidationError(f"iteration must be >= 0, got {iteration}")
    if policy.kind == "fixed":
        return float(policy.base_lr)
    if policy.kind == "step":
        exponent = iteration // int(policy.step_size)
        value = _LD(policy.base_lr) * _LD(policy.gamma) ** int(exponent)
        return float(value)
    if policy.kind == "inv":
        base = _LD(1.0) + _LD(policy.gamma) * _LD(int(iteration))
        value = _LD(policy.base_lr) * base ** (-_LD(policy.power))
        return float(value)
    raise SpecValidationError(f"unknown lr policy {policy.kind!r}")


def default_stage_policy(stage):
    """Published policy shapes; stage 2/3 inherit stage 1's base rate."""
    if stage == 1:
        return LrPolicy(kind="fixed", base_lr=0.001)
    if stage == 2:
        return LrPolicy(kind="step", base_lr=0.001, gamma=0.1, step_size=20000)
    if stage == 3:
        return LrPolicy(kind="inv", base_lr=0.001, gamma=1e-5, power=0.75)
    raise SpecValidationError(f"stage must be 1, 2 or 3, got {stage}")


@dataclass
class StageSchedule:
    name: str
    manifest: object  # path or an in-memory DatasetManifest
    policy: LrPolicy
    batch_size: int = 64
    max_iterations: int = 60000
    init_from: str = None
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    checkpoint_dir: str = "checkpoints"
    shuffle_seed: int = 0
    momentum: float = 0.0
    squared_loss: bool = False
    # Stage-3 extras: where to mine hard examples from, and the cutoff.
    source_manifest: str = None
    hard_threshold: float = None
    augment_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise SpecValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 1:
            raise SpecValidationError(f"max_iterations must be >= 1, "
                                      f"got {self.max_iterations}")
        if not 0.0 <= self.momentum < 1.0:
            raise SpecValidationError(f"momentum must be in [0, 1), "
                                      f"got {self.momentum}")


@dataclass
class TrainingLog:
    stage: str
    records: list = field(default_factory=list)      # (iter, lr, loss)
    checkpoints: list = field(default_factory=list)  # (iter, path)

    def append(self, iteration, lr, loss):
        if self.records and iteration <= self.records[-1][0]:
            raise SpecValidationError("log iterations must be strictly increasing")
        self.records.append((iteration, lr, loss))

    @property
    def losses(self):
        return [r[2] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "lr", "loss"])
            for it, lr, loss in self.records:
                w.writerow([it, repr(lr), repr(loss)])


class ManifestDataset:
    """Crops + flattened unit-frame targets for a training manifest.

    Small manifests are decoded once up front; past ``preload_limit``
    entries are decoded per batch to bound memory.
    """

    def __init__(self, manifest, spec: NetworkSpec, preload_limit=4096):
        if isinstance(manifest, (str, os.PathLike)):
            manifest = dataio.read_manifest(manifest)
        if manifest.n_landmarks != spec.n_landmarks:
            raise ShapeMismatchError(
                f"manifest has {manifest.n_landmarks} landmarks, "
                f"spec expects {spec.n_landmarks}")
        if not manifest.entries:
            raise ManifestError("training manifest is empty")
        self.manifest = manifest
        self.spec = spec
        self.n = len(manifest.entries)
        self._x = None
        self._y = None
        if self.n <= preload_limit:
            xs, ys = zip(*(self._decode(i) for i in range(self.n)))
            self._x = np.stack(xs)
            self._y = np.stack(ys)

    def _decode(self, i):
        entry = self.manifest.entries[i]
        sample = self.manifest.to_sample(entry)
        crop = dataio.load_gray_crop(sample, entry.bbox, self.spec.input_side,
                                     entry.warp())
        gt_unit = dataio.to_crop_frame(sample.landmarks, crop.crop_transform)
        return crop.pixels, gt_unit.points.ravel().astype(np.float32)

    def sample_ids(self, indices):
        return [self.manifest.entries[int(i)].sample_id for i in indices]

    def batch(self, indices):
        if self._x is not None:
            return self._x[indices], self._y[indices]
        xs, ys = zip(*(self._decode(int(i)) for i in indices))
        return np.stack(xs), np.stack(ys)


def batch_indices(n, batch_size, shuffle_seed, iteration):
    """Deterministic mini-batch for a 0-based iteration.

    Epoch e uses the permutation seeded by [shuffle_seed, e]; a short final
    batch wraps around to the head of the same permutation.
    """
    batches_per_epoch = -(-n // batch_size)
    epoch, pos = divmod(iteration, batches_per_epoch)
    perm = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return np.take(perm, np.arange(pos * batch_size, (pos + 1) * batch_size),
                   mode="wrap")


def _checkpoint_path(schedule, iteration, final=False):
    tag = "final" if final else f"iter{iteration:07d}"
    return os.path.join(schedule.checkpoint_dir, f"{schedule.name}_{tag}.sdnw")


def train_stage(weights, schedule: StageSchedule):
    """Run one stage from weights.iteration up to max_iterations.

    Returns (weights, TrainingLog).  The weights object is updated in place
    and its iteration counter advances with the loop, so a checkpoint
    carries everything needed for exact resume.
    """
    ds = ManifestDataset(schedule.manifest, weights.spec)
    log_ = TrainingLog(stage=schedule.name)
    os.makedirs(schedule.checkpoint_dir, exist_ok=True)
    velocities = None
    if schedule.momentum > 0.0:
        velocities = {name: np.zeros_like(arr)
                      for name, arr in weights.param_arrays()}
    it = weights.iteration
    if it >= schedule.max_iterations:
        log.info("stage %s: already at iteration %d >= %d, nothing to do",
                 schedule.name, it, schedule.max_iterations)
        return weights, log_
    while it < schedule.max_iterations:
        idx = batch_indices(ds.n, schedule.batch_size, schedule.shuffle_seed, it)
        x, y = ds.batch(idx)
        lr = lr_at(schedule.policy, it)
        loss, grads = backward(weights, x, y, squared=schedule.squared_loss)
        if not math.isfinite(loss):
            raise NumericalDivergenceError(iteration=it, lr=lr,
                                           batch_ids=ds.sample_ids(idx))
        for lid, layer in weights.layers.items():
            g = grads[lid]
            if velocities is None:
                sgd_update(layer.weights, g.d_weights, lr)
                sgd_update(layer.bias, g.d_bias, lr)
            else:
                vw = velocities[f"{lid}.weights"]
                vb = velocities[f"{lid}.bias"]
                vw *= schedule.momentum
                vw -= (lr * g.d_weights).astype(vw.dtype, copy=False)
                vb *= schedule.momentum
                vb -= (lr * g.d_bias).astype(vb.dtype, copy=False)
                layer.weights += vw
                layer.bias += vb
        log_.append(it, lr, loss)
        it += 1
        weights.iteration = it
        if schedule.checkpoint_every and it % schedule.checkpoint_every == 0 \
                and it < schedule.max_iterations:
            path = _checkpoint_path(schedule, it)
            save_weights(weights, path)
            log_.checkpoints.append((it, path))
    path = _checkpoint_path(schedule, it, final=True)
    save_weights(weights, path)
    log_.checkpoints.append((it, path))
    return weights, log_


def run_three_stage(schedules, spec: NetworkSpec = None, initial_weights=None):
    """Chain stage 1 -> 2 -> 3 with fine-tuning between stages.

    Stage 3's manifest is mined between stages: hard examples are selected
    from schedules[2].source_manifest with the stage-2 weights, then
    augmented with the slight-rotation recipe.  An empty hard set skips
    stage 3 with a notice.

    Returns (weights, {stage name: TrainingLog}).
    """
    if len(schedules) != 3:
        raise SpecValidationError(f"expected 3 stage schedules, got {len(schedules)}")
    s1, s2, s3 = schedules
    if initial_weights is not None:
        weights = initial_weights
    elif s1.init_from:
        weights = load_weights(s1.init_from)
    elif spec is not None:
        weights = build_network(spec)
    else:
        raise SpecValidationError("run_three_stage needs a spec, initial weights, "
                                  "or stage-1 init_from")
    logs = {}
    for schedule in (s1, s2):
        weights.iteration = 0  # stage iteration counters restart at each stage
        weights, logs[schedule.name] = _run_named_stage(weights, schedule)
    source = s3.source_manifest if s3.source_manifest is not None else s1.manifest
    if isinstance(source, (str, os.PathLike)):
        source = dataio.read_manifest(source)
    threshold = s3.hard_threshold if s3.hard_threshold is not None else 0.02
    hard = aug.select_hard_examples(weights, source, threshold)
    if not hard.entries:
        log.info("no hard examples above %.4g; stage %s skipped", threshold, s3.name)
        return weights, logs
    cfg = aug.AugmentStageConfig.stage3(rng_seed=s3.augment_seed,
                                        hard_threshold=None)
    s3_manifest = aug.run_stage(hard, cfg)
    if isinstance(s3.manifest, (str, os.PathLike)):
        dataio.write_manifest(s3.manifest, s3_manifest)
    s3 = replace(s3, manifest=s3_manifest)
    weights.iteration = 0
    weights, logs[s3.name] = _run_named_stage(weights, s3)
    return weights, logs


def _run_named_stage(weights, schedule):
    try:
        return train_stage(weights, schedule)
    except Exception as exc:
        log.error("stage %s failed: %s", schedule.name, exc)
        if hasattr(exc, "add_note"):
            exc.add_note(f"stage: {schedule.name}")
        raise


# --- stage config files ------------------------------------------------

_CONFIG_GRAMMAR = """\
Stage config (INI):

  [network]
  n_landmarks = 68          required
  input_side  = 64
  fc_hidden   = 256
  seed        = 7
  groups      = 3,32,32;3,64,64;3,128,128   kernel,conv1,conv2 per group

  [stage1] / [stage2] / [stage3]
  manifest         = path/to/train.tsv      required (stage3: output path)
  policy           = fixed | step | inv
  base_lr          = 0.001
  gamma            = 0.1        step/inv policies
  step_size        = 20000      step policy
  power            = 0.75       inv policy
  batch_size       = 64
  max_iterations   = 60000
  checkpoint_every = 0          0 writes only the final checkpoint
  checkpoint_dir   = checkpoints
  shuffle_seed     = 0
  momentum         = 0.0
  squared_loss     = false
  init_from        = path.sdnw  optional warm start
  source_manifest  = path       stage3: where hard examples come from
  hard_threshold   = 0.02       stage3
  augment_seed     = 0          stage3
"""


def _parse_groups(text):
    groups = []
    for part in text.split(";"):
        vals = [int(v) for v in part.split(",")]
        if len(vals) != 3:
            raise SpecValidationError(f"group spec needs kernel,conv1,conv2, "
                                      f"got {part!r}")
        groups.append(GroupSpec(kernel_size=vals[0], channels_conv1=vals[1],
                                channels_conv2=vals[2]))
    return tuple(groups)


def read_stage_config(path):
    """Parse an INI stage config into (NetworkSpec, [StageSchedule, ...])."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = cp.read(path)
    if not read:
        raise SpecValidationError(f"cannot read stage config {path}")
    if "network" not in cp:
        raise SpecValidationError(f"{path}: missing [network] section")
    net = cp["network"]
    if "n_landmarks" not in net:
        raise SpecValidationError(f"{path}: [network] needs n_landmarks")
    spec_kwargs = dict(
        n_landmarks=net.getint("n_landmarks"),
        input_side=net.getint("input_side", 64),
        fc_hidden=net.getint("fc_hidden", 256),
        seed=net.getint("seed", 7),
    )
    if "groups" in net:
        spec_kwargs["groups"] = _parse_groups(net["groups"])
    spec = NetworkSpec(**spec_kwargs)
    schedules = []
    for stage in (1, 2, 3):
        section = f"stage{stage}"
        if section not in cp:
            continue
        sec = cp[section]
        if "manifest" not in sec:
            raise SpecValidationError(f"{path}: [{section}] needs manifest")
        default = default_stage_policy(stage)
        policy = LrPolicy(
            kind=sec.get("policy", default.kind),
            base_lr=sec.getfloat("base_lr", default.base_lr),
            gamma=sec.getfloat("gamma", default.gamma),
            step_size=sec.getint("step_size", default.step_size),
            power=sec.getfloat("power", default.power),
        )
        schedules.append(StageSchedule(
            name=section,
            manifest=sec["manifest"],
            policy=policy,
            batch_size=sec.getint("batch_size", 64),
            max_iterations=sec.getint("max_iterations",
                                      20000 if stage == 3 else 60000),
            init_from=sec.get("init_from", None),
            checkpoint_every=sec.getint("checkpoint_every", 0),
            checkpoint_dir=sec.get("checkpoint_dir", "checkpoints"),
            shuffle_seed=sec.getint("shuffle_seed", 0),
            momentum=sec.getfloat("momentum", 0.0),
            squared_loss=sec.getboolean("squared_loss", False),
            source_manifest=sec.get("source_manifest", None),
            hard_threshold=sec.getfloat("hard_threshold", None)
            if "hard_threshold" in sec else None,
            augment_seed=sec.getint("augment_seed", 0),
        ))
    if not schedules:
        raise SpecValidationError(f"{path}: no [stageN] sections found")
    return spec, schedules
