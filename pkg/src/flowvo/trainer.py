"""Seeded training loop and the three generalisation experiments.

Every random choice during training (batch indices, crop parameters, flow
noise) is drawn from a generator seeded by ``(seed, step, purpose)``, so a
run is a pure function of its config and can be resumed at any step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .augment import crop_resize_batch, make_il, sample_rcr_params
from .errors import Diverged
from .geometry import DESK_CAMERA, CameraIntrinsics, RelativeMotion
from .losses import DEFAULT_LAMBDA, LossValue, Variant, motion_terms, total_loss
from .model import PoseNet, PoseNetConfig
from .synthgen import FlowField, NoiseModel, Sample, SceneConfig, generate_sample, _build_scene

log = logging.getLogger(__name__)

_BATCH, _CROP, _NOISE, _EVAL_CROP = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.2
    milestones: tuple = (0.5, 0.875)
    variant: str = "norm"
    lam: float = DEFAULT_LAMBDA
    use_rcr: bool = False
    use_il: bool = True
    seed: int = 0
    eval_every: int = 500
    eval_train_samples: int = 2000
    optimizer: str = "adam"
    noise_sigma: float = 0.0
    noise_dropout: float = 0.0
    fov_range: tuple = (40.0, 90.0)

    def __post_init__(self):
        ms = tuple(float(m) for m in self.milestones)
        if any(not 0 < m <= 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1]: {ms}")
        object.__setattr__(self, "milestones", ms)
        object.__setattr__(self, "fov_range", tuple(float(f) for f in self.fov_range))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("iterations, batch_size and eval_every must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        Variant(self.variant)
        NoiseModel(self.noise_sigma, self.noise_dropout)

    def lr_at(self, step):
        drops = sum(step >= m * self.iterations for m in self.milestones)
        return float(f"{self.lr * self.decay ** drops:.15g}")


@dataclass
class FlowDataset:
    """Samples stacked into arrays.

    ``ils`` is None when every sample shares ``intrinsics``; otherwise it
    holds a per-sample (H, W, 2) intrinsics layer.
    """

    flows: np.ndarray
    masks: np.ndarray
    motions: np.ndarray
    intrinsics: CameraIntrinsics
    ils: np.ndarray | None = None

    def __len__(self):
        return self.flows.shape[0]

    def subset(self, n):
        ils = None if self.ils is None else self.ils[:n]
        return FlowDataset(self.flows[:n], self.masks[:n], self.motions[:n],
                           self.intrinsics, ils)

    def il(self, idx):
        if self.ils is not None:
            return self.ils[idx]
        if getattr(self, "_base_il", None) is None:
            self._base_il = make_il(self.intrinsics).stacked().astype(np.float32)
        return np.broadcast_to(self._base_il, (len(idx),) + self._base_il.shape)

    def samples(self):
        for i in range(len(self)):
            yield Sample(FlowField(self.flows[i].astype(float)),
                         RelativeMotion.from_vector(self.motions[i]), self.intrinsics, self.masks[i])

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        k = samples[0].intrinsics
        return cls(np.stack([s.flow.data for s in samples]).astype(np.float32),
                   np.stack([s.valid_mask for s in samples]),
                   np.stack([s.motion.as_vector() for s in samples]), k)


def build_dataset(config: SceneConfig, environments, n, pattern="full_6dof",
                  k: CameraIntrinsics = DESK_CAMERA) -> FlowDataset:
    """``n`` samples interleaved over ``environments`` (sample i from env i mod E).

    A prefix of length m is the dataset of size m, so sizes are nested.
    """
    envs = list(environments)
    scenes = [_build_scene(config.with_environment(e)) for e in envs]
    flows = np.empty((n, k.height, k.width, 2), dtype=np.float32)
    masks = np.empty((n, k.height, k.width), dtype=bool)
    motions = np.empty((n, 6))
    for i in range(n):
        j = i % len(envs)
        s = generate_sample(config.with_environment(envs[j]), i // len(envs), pattern, k, scenes[j])
        flows[i] = s.flow.data
        masks[i] = s.valid_mask
        motions[i] = s.motion.as_vector()
    return FlowDataset(flows, masks, motions, k)


def apply_rcr(ds: FlowDataset, seed, fov_range=(40.0, 90.0)) -> FlowDataset:
    """A cropped-and-resized copy of ``ds`` with one fixed crop per sample."""
    rng = np.random.default_rng(seed)
    params = [sample_rcr_params(ds.intrinsics, rng, fov_range) for _ in range(len(ds))]
    parts = []
    for start in range(0, len(ds), 256):
        idx = np.arange(start, min(start + 256, len(ds)))
        parts.append(crop_resize_batch(ds.flows[idx], ds.masks[idx], ds.il(idx),
                                       params[start:start + 256]))
    flows, masks, ils = (np.concatenate(p) for p in zip(*parts))
    return FlowDataset(flows, masks, ds.motions.copy(), ds.intrinsics, ils)


def make_inputs(flows, ils, use_il):
    if use_il:
        return np.concatenate([flows, ils], axis=-1)
    return flows


def evaluate(net: PoseNet, ds: FlowDataset, variant, use_il, batch=250) -> LossValue:
    """Mean pose loss of ``net`` on ``ds`` (flow term is zero: inputs are oracle flow)."""
    trans = rot = 0.0
    for start in range(0, len(ds), batch):
        idx = np.arange(start, min(start + batch, len(ds)))
        x = make_inputs(ds.flows[idx], ds.il(idx), use_il)
        t, r = net.forward(x)
        m = motion_terms(variant, t, r, ds.motions[idx, :3], ds.motions[idx, 3:])
        trans += float(m.translation.sum())
        rot += float(m.rotation.sum())
    trans /= len(ds)
    rot /= len(ds)
    return LossValue(trans + rot, trans, rot, 0.0)


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    train: list = field(default_factory=list)
    tests: dict = field(default_factory=dict)

    def append(self, step, train, tests):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must be strictly increasing")
        for v in [train, *tests.values()]:
            if not math.isfinite(v.total):
                raise Diverged(f"non-finite loss at step {step}")
        self.steps.append(step)
        self.train.append(train)
        for name, v in tests.items():
            self.tests.setdefault(name, []).append(v)

    def __len__(self):
        return len(self.steps)

    def final(self):
        return self.train[-1], {k: v[-1] for k, v in self.tests.items()}


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        return [self.m[k] for k in self.m] + [self.v[k] for k in self.v]

    def load_state(self, flat, t):
        offset = 0
        for store in (self.m, self.v):
            for k, a in store.items():
                a[...] = flat[offset:offset + a.size].reshape(a.shape)
                offset += a.size
        self.t = t


class SGD:
    def __init__(self, params):
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        for k, g in grads.items():
            params[k] -= lr * g

    def state_arrays(self):
        return []

    def load_state(self, flat, t):
        self.t = t


def make_optimizer(cfg: TrainConfig, net: PoseNet):
    return Adam(net.params) if cfg.optimizer == "adam" else SGD(net.params)


def _train_eval_set(ds: FlowDataset, cfg: TrainConfig):
    sub = ds.subset(min(len(ds), cfg.eval_train_samples))
    if cfg.use_rcr:
        sub = apply_rcr(sub, [cfg.seed, _EVAL_CROP], cfg.fov_range)
    return sub


def batch_at(ds: FlowDataset, cfg: TrainConfig, step):
    """Network inputs, oracle flow, masks and motion labels for one step."""
    rng = np.random.default_rng([cfg.seed, step, _BATCH])
    idx = np.sort(rng.integers(0, len(ds), size=cfg.batch_size))
    flows = ds.flows[idx].copy()
    masks = ds.masks[idx].copy()
    ils = np.array(ds.il(idx), dtype=np.float32)
    if cfg.use_rcr:
        rng = np.random.default_rng([cfg.seed, step, _CROP])
        params = [sample_rcr_params(ds.intrinsics, rng, cfg.fov_range) for _ in idx]
        flows, masks, ils = crop_resize_batch(flows, masks, ils, params)
    oracle = flows
    if cfg.noise_sigma > 0 or cfg.noise_dropout > 0:
        rng = np.random.default_rng([cfg.seed, step, _NOISE])
        noisy = flows + cfg.noise_sigma * rng.normal(size=flows.shape).astype(np.float32)
        noisy[rng.random(flows.shape[:3]) < cfg.noise_dropout] = 0.0
        flows = noisy
    return make_inputs(flows, ils, cfg.use_il), flows, oracle, masks, ds.motions[idx]


def train(net: PoseNet, dataset: FlowDataset, test_sets: dict, cfg: TrainConfig,
          start_step=0, optimizer=None, checkpoint=None):
    """Minibatch training with the step-decay schedule.

    Returns ``(net, curve)``; ``net`` is updated in place.  ``checkpoint`` is
    an optional callable ``(step, net, optimizer)`` invoked at every
    evaluation point, which is what resuming relies on.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    expected = 4 if cfg.use_il else 2
    if net.config.in_channels != expected:
        raise ValueError(f"use_il={cfg.use_il} needs a net with {expected} input channels")
    curve = LossCurve()
    if cfg.iterations == 0:
        return net, curve
    optimizer = optimizer or make_optimizer(cfg, net)
    train_eval = _train_eval_set(dataset, cfg)
    for step in range(start_step, cfg.iterations):
        x, inputs, oracle, masks, motions = batch_at(dataset, cfg, step)
        flow_pred = inputs if cfg.lam > 0 else None
        t, r, cache = net.forward(x, keep=True)
        value, grads = total_loss(flow_pred, oracle, masks, t, r, motions[:, :3],
                                  motions[:, 3:], cfg.lam, cfg.variant)
        if not math.isfinite(value.total):
            raise Diverged(f"non-finite training loss at step {step}")
        g = net.backward(cache, grads.translation, grads.rotation)
        optimizer.step(net.params, g, cfg.lr_at(step))
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            tr = evaluate(net, train_eval, cfg.variant, cfg.use_il)
            tests = {name: evaluate(net, ds, cfg.variant, cfg.use_il)
                     for name, ds in test_sets.items()}
            curve.append(done, tr, tests)
            log.info("step %d train %.4f %s", done, tr.total,
                     " ".join(f"{k} {v.total:.4f}" for k, v in tests.items()))
            if checkpoint is not None:
                checkpoint(done, net, optimizer)
    return net, curve


def new_net(cfg: TrainConfig, k: CameraIntrinsics = DESK_CAMERA, net_seed=None, dtype=np.float32):
    seed = cfg.seed if net_seed is None else net_seed
    return PoseNet(PoseNetConfig(width=k.width, height=k.height,
                                 in_channels=4 if cfg.use_il else 2, seed=seed), dtype=dtype)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

TRAIN_ENVS = tuple(range(16))
TEST_ENVS = tuple(range(1000, 1004))


@dataclass(frozen=True)
class RunResult:
    name: str
    config: TrainConfig
    curve: LossCurve
    net: PoseNet = field(repr=False)

    @property
    def final_train(self):
        return self.curve.train[-1]

    def final_test(self, split):
        return self.curve.tests[split][-1]


def experiment_data_quantity(sizes, cfg: TrainConfig, train_pool: FlowDataset,
                             test_set: FlowDataset):
    """One net per training-set size, nested prefixes of ``train_pool``."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 3:
        raise ValueError("at least three training sizes are needed")
    if any(s <= 0 for s in sizes):
        raise ValueError("training sizes must be positive")
    if max(sizes) > len(train_pool):
        raise ValueError(f"train pool holds {len(train_pool)} samples, need {max(sizes)}")
    results = {}
    for n in sizes:
        net = new_net(cfg)
        _, curve = train(net, train_pool.subset(n), {"heldout": test_set}, cfg)
        results[n] = RunResult(f"size_{n}", cfg, curve, net)
    return results


def experiment_up_to_scale(cfg: TrainConfig, train_set: FlowDataset, test_sets: dict,
                           variants=("full", "norm")):
    """Train one net per loss variant and report the translation/rotation gaps."""
    results = {}
    for v in variants:
        c = replace(cfg, variant=v)
        net = new_net(c)
        _, curve = train(net, train_set, test_sets, c)
        results[v] = RunResult(v, c, curve, net)
    return results


def generalization_gap(result: RunResult, split, term="total"):
    tr = getattr(result.final_train, term)
    te = getattr(result.final_test(split), term)
    return te - tr


RCR_IL_CELLS = (("no_rcr_no_il", False, False), ("no_rcr_il", False, True),
                ("rcr_no_il", True, False), ("rcr_il", True, True))


def experiment_rcr_il(cfg: TrainConfig, train_set: FlowDataset, test_fixed: FlowDataset,
                      test_rcr: FlowDataset):
    """The four {RCR, no RCR} x {IL, no IL} runs sharing data and seeds."""
    results = {}
    tests = {"rcr": test_rcr, "fixed": test_fixed}
    for name, use_rcr, use_il in RCR_IL_CELLS:
        c = replace(cfg, use_rcr=use_rcr, use_il=use_il)
        net = new_net(c)
        _, curve = train(net, train_set, tests, c)
        results[name] = RunResult(name, c, curve, net)
    return results


# ---------------------------------------------------------------------------
# desk-scale setups shared by the CLI and the acceptance tests
# ---------------------------------------------------------------------------

# near geometry and small rotations: translation dominates the flow, so the
# focal length matters for recovering its direction
DESK_SCENE = SceneConfig(seed=7, depth_range=(1.0, 5.0), translation_range=(0.3, 1.0),
                         rotation_range=(0.0, 0.05))
SCALED_WORLD = 3.0
EXPERIMENTS = ("data_quantity", "up_to_scale", "rcr_il")


@dataclass
class ExperimentReport:
    name: str
    config: dict
    results: dict
    header: list
    rows: list


def run_experiment(name, cfg: TrainConfig, scene=None, sizes=(1000, 5000, 20000),
                   train_count=2000, test_count=1000, pattern="full_6dof"):
    """Build the datasets for experiment ``name``, run it and tabulate the finals."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}")
    scene = replace(DESK_SCENE, **(scene or {}))
    echo = {"experiment": name, "train": asdict(cfg), "scene": asdict(scene),
            "test_count": test_count, "pattern": pattern}
    heldout = build_dataset(scene, TEST_ENVS, test_count, pattern)
    if name == "data_quantity":
        echo["sizes"] = list(sizes)
        pool = build_dataset(scene, TRAIN_ENVS, max(sizes), pattern)
        results = experiment_data_quantity(sizes, cfg, pool, heldout)
        header = ["size", "train", "test", "gap"]
        rows = [[str(n), r.final_train.total, r.final_test("heldout").total,
                 generalization_gap(r, "heldout")] for n, r in results.items()]
        return ExperimentReport(name, echo, {f"size_{n}": r for n, r in results.items()},
                                header, rows)
    echo["train_count"] = train_count
    train_set = build_dataset(scene, TRAIN_ENVS, train_count, pattern)
    if name == "up_to_scale":
        echo["scaled_world"] = SCALED_WORLD
        scaled = build_dataset(scene.scaled(SCALED_WORLD), TEST_ENVS, test_count, pattern)
        results = experiment_up_to_scale(cfg, train_set, {"heldout": heldout, "scaled": scaled})
        header = ["variant", "split", "train_translation", "test_translation",
                  "translation_gap", "train_rotation", "test_rotation", "rotation_gap"]
        rows = []
        for v, r in results.items():
            for split in ("heldout", "scaled"):
                tr, te = r.final_train, r.final_test(split)
                rows.append([v, split, tr.translation_term, te.translation_term,
                             te.translation_term - tr.translation_term, tr.rotation_term,
                             te.rotation_term, te.rotation_term - tr.rotation_term])
        return ExperimentReport(name, echo, results, header, rows)
    test_rcr = apply_rcr(heldout, [cfg.seed, _EVAL_CROP, 1], cfg.fov_range)
    results = experiment_rcr_il(cfg, train_set, heldout, test_rcr)
    header = ["run", "rcr", "il", "train", "test_rcr", "test_fixed"]
    rows = [[n, str(r.config.use_rcr).lower(), str(r.config.use_il).lower(), r.final_train.total,
             r.final_test("rcr").total, r.final_test("fixed").total] for n, r in results.items()]
    return ExperimentReport(name, echo, results, header, rows)


# budgets sized to finish each experiment in under 30 minutes on one core
_DESK_TRAIN = TrainConfig(iterations=9000, lr=5e-4, eval_every=3000)
EXPERIMENT_DEFAULTS = {
    "data_quantity": {"cfg": _DESK_TRAIN, "sizes": (1000, 5000, 20000)},
    "up_to_scale": {"cfg": _DESK_TRAIN, "train_count": 2000},
    "rcr_il": {"cfg": _DESK_TRAIN, "train_count": 2000},
}
