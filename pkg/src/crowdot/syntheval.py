"""Synthetic mixed-density scenes, counting metrics, toy training and ablations."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .grid import PointAnnotations, dot_map, gaussian_rasterize
from .nets import FUSIONS, SUPPORTED_LAYERS, ModelConfig, ToyModel
from .ot import CostKind, SolverConfig, combined_loss

LAYOUTS = ("halves", "gradient", "uniform")
SIGMAS = (4.0, 8.0, 16.0, 32.0, math.inf)
ABLATION_HEADER = ("config_id", "fusion", "n_layers", "sigma", "mae", "mse", "steps", "seed")
TRACE_HEADER = ("step", "counting", "ot", "tv", "total")
IMAGE_SIGMA = 1.0
IMAGE_GAIN = 4.0

# eps in squared image pixels; the density cells are 8 px wide
TRAIN_SOLVER = SolverConfig(eps_schedule=(64.0, 16.0), tol=1e-6, stage_tol=1e-3, max_iter=500)


@dataclass(frozen=True)
class SyntheticScene:
    annotations: PointAnnotations
    density_profile: dict
    seed: int

    @property
    def count(self) -> int:
        return self.annotations.count


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_image: list = field(default_factory=list)


def _intensity(layout, x, width, sparse_rate, dense_rate):
    """People per pixel at horizontal position x."""
    if layout == "halves":
        return np.where(x < width / 2, sparse_rate, dense_rate) / 1000.0
    if layout == "gradient":
        return (sparse_rate + (dense_rate - sparse_rate) * x / width) / 1000.0
    return np.full_like(x, sparse_rate / 1000.0)


def gen_scene(width: int, height: int, sparse_rate: float, dense_rate: float,
              layout: str = "halves", seed: int = 0, hflip: bool = False) -> SyntheticScene:
    """Poisson points with region-dependent intensity (rates in people per 1000 px).

    ``halves`` puts ``sparse_rate`` on the left half and ``dense_rate`` on the
    right; ``gradient`` ramps linearly from one to the other left to right;
    ``uniform`` uses ``sparse_rate`` everywhere.  ``hflip`` mirrors the scene.
    """
    if sparse_rate < 0 or dense_rate < 0:
        raise ValueError("rates must be nonnegative")
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    rng = np.random.default_rng(seed)
    peak = max(sparse_rate, dense_rate if layout != "uniform" else 0.0) / 1000.0
    n = rng.poisson(peak * width * height)
    pts = rng.random((n, 2)) * [width, height]
    keep = rng.random(n) * peak < _intensity(layout, pts[:, 0], width, sparse_rate, dense_rate)
    pts = pts[keep]
    if hflip:
        pts[:, 0] = np.nextafter(width - pts[:, 0], 0)
    profile = {"layout": layout, "sparse_rate": sparse_rate, "dense_rate": dense_rate, "hflip": hflip}
    return SyntheticScene(PointAnnotations(width, height, pts), profile, seed)


def render_image(scene: SyntheticScene, noise: float = 0.02) -> np.ndarray:
    """Grayscale stand-in image: a small blob per head plus seeded background noise."""
    ann = scene.annotations
    img = IMAGE_GAIN * gaussian_rasterize(ann, IMAGE_SIGMA).values
    rng = np.random.default_rng([scene.seed, 101])
    return img + noise * rng.random(img.shape)


def mae_mse(reports) -> EvalReport:
    """MAE and the root-mean-square count error (reported under the name ``mse``).

    ``reports`` holds ``(estimate, ground_truth)`` pairs.
    """
    pairs = [(float(a), float(b)) for a, b in reports]
    if not pairs:
        raise ValueError("need at least one (estimate, ground truth) pair")
    err = np.array([a - b for a, b in pairs])
    return EvalReport(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2))), [(b, a) for a, b in pairs])


@dataclass
class LossConfig:
    cost: str = "correntropy"
    sigma: float = 16.0

    def cost_kind(self) -> CostKind:
        if self.cost == "l2":
            return CostKind.l2()
        if self.cost == "correntropy":
            return CostKind.correntropy(self.sigma)
        raise ValueError(f"unknown cost {self.cost!r}")


@dataclass
class TrainResult:
    trace: list
    model: ToyModel
    final_eval: EvalReport
    seed: int


class GradientDescent:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OPTIMIZERS = {"adam": Adam, "gd": GradientDescent}


class Diverged(RuntimeError):
    """Training produced a non-finite loss, or a prediction with no mass."""

    def __init__(self, step):
        super().__init__(f"non-finite or undefined loss at step {step}")
        self.step = step


def _targets(scenes, size):
    return [dot_map(s.annotations, size, size) for s in scenes]


def evaluate(model: ToyModel, scenes) -> EvalReport:
    images = np.stack([render_image(s) for s in scenes])
    out, _ = model.forward(images)
    return mae_mse([(o.sum(), s.count) for o, s in zip(out, scenes)])


def train_toy(scenes, model_cfg: ModelConfig = ModelConfig(), loss_cfg: LossConfig = LossConfig(),
              steps: int = 500, lr: float = 1e-3, seed: int = 0, clip: float | None = None,
              solver: SolverConfig = TRAIN_SOLVER, optimizer: str = "gd") -> TrainResult:
    """Full-batch training on the mean composite loss over ``scenes``.

    ``optimizer`` is ``"gd"`` (plain gradient descent) or ``"adam"``.  The
    step size follows a cosine decay from ``lr`` to ``lr / 100``; if ``clip``
    is set, gradients are rescaled to at most that global norm.  Each
    trace row is ``(step, counting, ot, tv, total)`` averaged over scenes and
    measured before that step's update.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one scene")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
    if any(s.count == 0 for s in scenes):
        raise ValueError("training scenes must contain at least one annotated point")
    model_cfg = replace(model_cfg, seed=seed)
    model = ToyModel(model_cfg)
    images = np.stack([render_image(s) for s in scenes])
    size = model_cfg.density_size
    cell = scenes[0].annotations.width / size
    targets = _targets(scenes, size)
    cost = loss_cfg.cost_kind()
    warm = [{} for _ in scenes]
    opt = OPTIMIZERS[optimizer](lr)
    trace = []
    for step in range(steps):
        out, cache = model.forward(images)
        if not np.all(np.isfinite(out)) or (out.sum(axis=(1, 2)) <= 0).any():
            raise Diverged(step)
        grad_out = np.empty_like(out)
        terms = np.zeros(4)
        for i, (o, z, s) in enumerate(zip(out, targets, scenes)):
            lb = combined_loss(z, o, cost, solver, points=s.annotations.points, cell=cell, warm=warm[i])
            grad_out[i] = lb.grad_wrt_prediction / len(scenes)
            terms += [lb.counting, lb.ot, lb.tv, lb.total]
        terms /= len(scenes)
        if not np.all(np.isfinite(terms)):
            raise Diverged(step)
        trace.append((step, *terms.tolist()))
        grads = model.backward(grad_out, cache)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not math.isfinite(norm):
            raise Diverged(step)
        if clip and norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        opt.lr = lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * step / steps)))
        opt.step(model.params, grads)
    return TrainResult(trace, model, evaluate(model, scenes), seed)


def toy_benchmark(n_scenes: int = 8, size: int = 64, seed: int = 0, layout: str = "halves",
                  sparse_rate: float = 4.0, dense_rate: float = 20.0):
    """Fixed set of mixed-density scenes; every scene has at least one point."""
    scenes = []
    k = 0
    while len(scenes) < n_scenes:
        s = gen_scene(size, size, sparse_rate, dense_rate, layout, seed=seed * 1000 + k)
        k += 1
        if s.count:
            scenes.append(s)
    return scenes


@dataclass
class AblationSettings:
    steps: int = 5
    lr: float = 1e-3
    seed: int = 0
    n_scenes: int = 2
    size: int = 64
    # small bandwidths make the pixel-scale cost steep enough to blow up unclipped steps
    clip: float = 1.0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(t_decoder=(8, 8), c_decoder=(16, 8, 8)))


def _run_config(args):
    config_id, fusion, n_layers, sigma, settings = args
    scenes = toy_benchmark(settings.n_scenes, settings.size, settings.seed)
    mcfg = replace(settings.model, fusion=fusion, n_layers=n_layers)
    loss = LossConfig("correntropy", sigma)
    res = train_toy(scenes, mcfg, loss, settings.steps, settings.lr, settings.seed, clip=settings.clip)
    rep = res.final_eval
    return (config_id, fusion, n_layers, sigma, rep.mae, rep.mse, settings.steps, settings.seed)


def ablate(fusions=FUSIONS, layers=SUPPORTED_LAYERS, sigmas=SIGMAS,
           settings: AblationSettings = AblationSettings(), jobs: int = 1) -> list:
    """One toy training run per (fusion, n_layers, sigma) config; rows match ``ABLATION_HEADER``."""
    for f in fusions:
        if f not in FUSIONS:
            raise ValueError(f"unknown fusion {f!r}")
    for n in layers:
        if n not in SUPPORTED_LAYERS:
            raise ValueError(f"unsupported layer count {n}")
    for s in sigmas:
        if not s > 0:
            raise ValueError("sigma must be positive")
    grid = [(i, f, n, float(s), settings)
            for i, (f, n, s) in enumerate((f, n, s) for f in fusions for n in layers for s in sigmas)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_run_config, grid))
    return [_run_config(a) for a in grid]


def settings_dict(settings: AblationSettings) -> dict:
    d = asdict(settings)
    return d
