"""Fitting the environment field and albedo texture to multi-view images.

Each training pixel is modelled as a weighted sum of *terms*: field cones
(rendered through the environment field) and albedo samples (diffuse texture
lookups). The surface path uses one virtual cone and one albedo sample per
object pixel; the volumetric path uses one of each per SDF-density sample plus
the leftover-transmittance primary cone. Geometry-dependent quantities (hits,
virtual cones, weights) are fixed for known geometry and rebuilt per batch
when geometry parameters are being refined.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import virtual_sensor as vs
from .env_field import ConeSet, EnvField, backward, make_cones, render_cones, render_novel_view, save_field
from .errors import ConfigError, InsufficientBaseline, NonFiniteLoss
from .metrics import LayerMetrics, Metrics, normal_mae, psnr, ssim
from .rendering import SurfaceAlbedo, volume_samples

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class FitConfig:
    iterations: int = 2000
    batch_size: int = 4096
    lr_field: float = 1e-2
    lr_density: float | None = None  # raw-density rate; defaults to lr_field
    lr_albedo: float = 1e-2
    lr_geometry: float = 1e-3
    lr_decay: float = 1.0  # learning-rate multiplier reached at the last iteration (exponential)
    geometry: str = "known"  # known | refine
    cone: str = "curved"  # curved | naive
    forward: str = "surface"  # surface | volumetric
    tv_weight: float = 1e-3
    tv_sh_weight: float = 0.0
    seed: int = 0
    resolution: int = 32
    sh_degree: int = 2
    init_density: float = 0.05
    init_rgb: float = 0.5
    init_albedo: float = 0.5
    opaque_far: bool = False
    n_samples: int = 64
    jitter: bool = True
    w_eps: float = 1e-4
    t_eps: float = 1e-4
    albedo_height: int = 32
    albedo_width: int = 64
    fit_albedo: bool = True
    fit_direct: bool = False
    mask_threshold: float = 1.0
    holdout_every: int = 8
    alpha: float = 100.0
    beta: float = 0.01
    vol_samples: int = 32
    vol_min_weight: float = 1e-3
    geometry_every: int = 10
    fd_step: float = 1e-3
    theta_init: tuple = ()
    rdot_scale: float = 1.0
    near_offset: float = 0.0  # field sampling starts this far past the virtual pixel
    baseline_tol: float = 1e-3
    checkpoint_every: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.theta_init = tuple(float(t) for t in self.theta_init)
        self.validate()

    def validate(self):
        if self.lr_density is not None and not self.lr_density > 0:
            raise ConfigError("must be > 0", "lr_density")
        for name in ("lr_field", "lr_albedo", "lr_geometry", "lr_decay", "alpha", "beta", "fd_step"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        for name in ("iterations", "batch_size", "resolution", "n_samples", "vol_samples", "albedo_height", "albedo_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1", name)
        if self.n_samples < 2:
            raise ConfigError("must be >= 2", "n_samples")
        if not 2 <= self.resolution <= 256:
            raise ConfigError("must lie in [2, 256]", "resolution")
        if self.sh_degree not in (0, 1, 2):
            raise ConfigError("must be 0, 1 or 2", "sh_degree")
        for name, choices in (("geometry", ("known", "refine")), ("cone", ("curved", "naive")), ("forward", ("surface", "volumetric"))):
            if getattr(self, name) not in choices:
                raise ConfigError(f"must be one of {choices}", name)
        for name in ("tv_weight", "tv_sh_weight", "w_eps", "t_eps", "near_offset"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", name)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ConfigError("unknown fit option", k)
            default = names[k].default
            if isinstance(default, bool) and not isinstance(v, bool):
                raise ConfigError(f"expected true/false, got {v!r}", k)
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"expected a number, got {v!r}", k)
                if isinstance(default, int) and not isinstance(v, int):
                    raise ConfigError(f"expected an integer, got {v!r}", k)
            if isinstance(default, str) and not isinstance(v, str):
                raise ConfigError(f"expected a string, got {v!r}", k)
            if k == "lr_density" and v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"expected a number, got {v!r}", k)
            if k == "theta_init":
                if not isinstance(v, (list, tuple)) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                    raise ConfigError("expected a list of numbers", k)
                v = tuple(float(x) for x in v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "FitConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"fit config not found: {path}", "config")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML syntax error: {exc}", "config") from exc
        return cls.from_dict(data["fit"] if "fit" in data else {k: v for k, v in data.items() if k != "eval"})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["theta_init"] = list(self.theta_init)
        return d


class Adam:
    """Adam with bias correction over a dict of float64 arrays, updated in place."""

    def __init__(self, shapes: dict, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict:
        out = {f"{prefix}.t": np.array(self.t)}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load(self, prefix: str, data) -> None:
        self.t = int(data[f"{prefix}.t"])
        for k in self.m:
            self.m[k] = np.array(data[f"{prefix}.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(data[f"{prefix}.v.{k}"], dtype=np.float64)


def tv_loss(grid: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between axis neighbours over the first three axes, and its gradient."""
    total = 0.0
    grad = np.zeros_like(grid)
    count = sum(grid.size // grid.shape[a] * (grid.shape[a] - 1) for a in range(3))
    for a in range(3):
        d = np.diff(grid, axis=a)
        total += float(np.sum(d * d))
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        grad[tuple(lo)] -= 2.0 * d
        grad[tuple(hi)] += 2.0 * d
    return total / count, grad / count


@dataclass
class PixelRays:
    """Training pixels: camera rays, cone frames, targets and coverage."""

    origin: np.ndarray
    direction: np.ndarray
    eu: np.ndarray
    ev: np.ndarray
    rdot: np.ndarray
    target: np.ndarray
    view: np.ndarray
    covered: np.ndarray  # ground-truth object coverage == 1

    def __len__(self):
        return len(self.direction)

    def subset(self, idx) -> "PixelRays":
        return PixelRays(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def collect_pixels(views, cfg: FitConfig) -> PixelRays:
    parts = []
    for v in views:
        cam = v.camera
        mixed = v.layer("mixed").reshape(-1, 3)
        mask = v.layer("mask").reshape(-1)
        ii, jj = cam.pixel_grid()
        d = cam.directions(ii + 0.5, jj + 0.5)
        eu, ev = cam.cone_frames(d)
        covered = mask >= cfg.mask_threshold
        keep = covered if not cfg.fit_direct else (covered | (mask <= 0.0))
        n = int(keep.sum())
        parts.append(PixelRays(
            np.broadcast_to(cam.origin, (n, 3)).copy(), d[keep], eu[keep], ev[keep],
            np.full(n, cam.rdot * cfg.rdot_scale), mixed[keep], np.full(n, v.index), covered[keep],
        ))
    return PixelRays(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in dataclasses.fields(PixelRays)))


@dataclass
class Terms:
    """Per-pixel terms in pixel order with CSR offsets (``*_ptr`` has length ``P + 1``)."""

    cones: ConeSet
    cone_coef: np.ndarray
    cone_ptr: np.ndarray
    alb_points: np.ndarray
    alb_coef: np.ndarray
    alb_ptr: np.ndarray

    def gather(self, pix: np.ndarray):
        """Terms of pixels ``pix``; owners index into ``pix``."""
        ci, co = _csr_gather(self.cone_ptr, pix)
        ai, ao = _csr_gather(self.alb_ptr, pix)
        return (self.cones.subset(ci), self.cone_coef[ci], co, self.alb_points[ai], self.alb_coef[ai], ao)


def _csr_gather(ptr, rows):
    counts = ptr[rows + 1] - ptr[rows]
    owner = np.repeat(np.arange(len(rows)), counts)
    start = np.repeat(ptr[rows] - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return start + np.arange(counts.sum()), owner


def _ptr(owner, P):
    return np.concatenate([[0], np.cumsum(np.bincount(owner, minlength=P))]).astype(np.int64)


def build_terms(sdf, pixels: PixelRays, env: EnvField, scene, cfg: FitConfig) -> tuple[Terms, vs.VirtualConeBatch | None]:
    """Geometry-dependent terms for ``pixels``; also returns the surface virtual cones."""
    P = len(pixels)
    rho, E = scene.object.rho_s, scene.object.irradiance
    gcfg = scene.geometry
    t_max = 1e3
    cones = vs.build_virtual_cones(sdf, pixels.origin, pixels.direction, pixels.rdot, pixels.eu, pixels.ev,
                                   cfg.cone, gcfg, t_max=t_max)
    hit = cones.valid
    # a surface hit without a usable virtual cone still has a diffuse term
    surf = np.all(np.isfinite(cones.point), axis=1)

    c_apex, c_axis, c_rdot, c_near, c_coef, c_own = [], [], [], [], [], []
    a_pts, a_coef, a_own = [], [], []

    def add_cones(own, apex, axis, rdot, near, coef):
        c_own.append(own); c_apex.append(apex); c_axis.append(axis); c_rdot.append(rdot)
        c_near.append(near); c_coef.append(coef)

    if cfg.forward == "surface":
        ok = np.nonzero(hit)[0]
        add_cones(ok, cones.apex[ok], cones.axis[ok], cones.rdot[ok], cones.near[ok] + cfg.near_offset, np.full(len(ok), rho))
        s = np.nonzero(surf)[0]
        a_own.append(s); a_pts.append(cones.point[s]); a_coef.append(np.full(len(s), E))
        miss = np.nonzero(~surf)[0]
    else:
        c, r = geo.bounding_sphere(sdf)
        lo, hi = geo.ray_sphere_roots(pixels.origin, pixels.direction, c, 1.05 * r)
        inb = np.nonzero(np.isfinite(lo) & (hi > 0))[0]
        vsamp = volume_samples(sdf, pixels.origin[inb], pixels.direction[inb], np.maximum(lo[inb], 0.0), hi[inb],
                               cfg.alpha, cfg.beta, cfg.vol_samples, gcfg)
        pi, si = np.nonzero(vsamp.weights > cfg.vol_min_weight)
        own = inb[pi]
        w = vsamp.weights[pi, si]
        ts = vsamp.t[pi, si]
        vc = vs.virtual_cones_at(sdf, pixels.origin[own], pixels.direction[own], pixels.rdot[own],
                                 pixels.eu[own], pixels.ev[own], ts, cfg.cone, gcfg)
        ok = vc.valid
        add_cones(own[ok], vc.apex[ok], vc.axis[ok], vc.rdot[ok], vc.near[ok] + cfg.near_offset, rho * w[ok])
        a_own.append(own); a_pts.append(vc.point); a_coef.append(E * w)
        T = np.ones(P)
        T[inb] = vsamp.transmittance
        miss = np.nonzero(T > cfg.vol_min_weight)[0]
        direct_coef = T[miss]
    if cfg.forward == "surface":
        direct_coef = np.ones(len(miss))
    add_cones(miss, pixels.origin[miss], pixels.direction[miss], pixels.rdot[miss], np.zeros(len(miss)), direct_coef)

    own = np.concatenate(c_own)
    order = np.argsort(own, kind="stable")
    cs = make_cones(env, np.concatenate(c_apex)[order], np.concatenate(c_axis)[order],
                    np.concatenate(c_rdot)[order], near=np.concatenate(c_near)[order])
    aown = np.concatenate(a_own)
    aorder = np.argsort(aown, kind="stable")
    terms = Terms(
        cones=cs,
        cone_coef=np.concatenate(c_coef)[order],
        cone_ptr=_ptr(own, P),
        alb_points=np.concatenate(a_pts)[aorder].reshape(-1, 3),
        alb_coef=np.concatenate(a_coef)[aorder],
        alb_ptr=_ptr(aown, P),
    )
    return terms, cones


def baseline_spread(cones: vs.VirtualConeBatch, views: np.ndarray) -> float:
    """Largest distance of a per-view virtual-origin centroid from the mean centroid."""
    cents = []
    for v in np.unique(views):
        sel = (views == v) & cones.valid
        if sel.any():
            cents.append(cones.apex[sel].mean(axis=0))
    if len(cents) < 2:
        return 0.0
    cents = np.array(cents)
    return float(np.max(np.linalg.norm(cents - cents.mean(axis=0), axis=1)))


@dataclass
class Batch:
    iteration: int
    pixels: np.ndarray
    cones: ConeSet
    cone_coef: np.ndarray
    cone_owner: np.ndarray
    alb_points: np.ndarray
    alb_coef: np.ndarray
    alb_owner: np.ndarray
    target: np.ndarray
    jitter: np.ndarray | None


@dataclass
class FitState:
    field: EnvField
    albedo: SurfaceAlbedo
    theta: np.ndarray
    iteration: int = 0
    losses: list = field(default_factory=list)


class FitProblem:
    """Training pixels, their terms and the batch loss/gradient for one scene prior."""

    def __init__(self, scene, views, cfg: FitConfig):
        self.scene = scene
        self.cfg = cfg
        self.pixels = collect_pixels(views, cfg)
        if len(self.pixels) == 0:
            raise ConfigError("no training pixels (empty object masks?)", "dataset")
        sdf = scene.sdf
        self.params = tuple(getattr(sdf, "params", ()))
        if cfg.geometry == "refine" and not self.params:
            raise ConfigError("geometry refinement needs free parameters in the scene object", "geometry")
        theta0 = cfg.theta_init or (tuple(getattr(sdf, "theta", ())))
        if len(theta0) != len(self.params):
            raise ConfigError(f"expected {len(self.params)} values", "theta_init")
        self.theta0 = np.array(theta0, dtype=np.float64)
        self.bounds = scene.field_bounds()
        self._terms: Terms | None = None
        self._probe = EnvField.create(2, *self.bounds, sh_degree=0)

    def sdf(self, theta) -> geo.Sdf:
        base = self.scene.sdf
        return base.with_theta(theta) if self.params else base

    def terms(self, theta=None, idx=None) -> tuple[Terms, vs.VirtualConeBatch]:
        theta = self.theta0 if theta is None else theta
        px = self.pixels if idx is None else self.pixels.subset(idx)
        return build_terms(self.sdf(theta), px, self._probe, self.scene, self.cfg)

    def known_terms(self) -> Terms:
        if self._terms is None:
            self._terms, self.surface_cones = self.terms()
        return self._terms

    def check_baseline(self, force: bool = False) -> float:
        _, cones = self.terms()
        spread = baseline_spread(cones, self.pixels.view)
        scale = 0.5 * float(np.linalg.norm(self.bounds[1] - self.bounds[0]))
        if spread < self.cfg.baseline_tol * scale:
            msg = f"virtual origins spread {spread:.3g} < {self.cfg.baseline_tol:g} x scene scale {scale:.3g}"
            if not force:
                raise InsufficientBaseline(msg)
            warnings.warn(msg, stacklevel=2)
        return spread

    def batch(self, it: int, theta=None) -> Batch:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, it])
        P = len(self.pixels)
        pix = rng.integers(0, P, size=min(cfg.batch_size, P)) if cfg.batch_size < P else np.arange(P)
        if cfg.geometry == "known":
            g = self.known_terms().gather(pix)
        else:
            t, _ = self.terms(theta, pix)
            g = t.gather(np.arange(len(pix)))
        jitter = rng.random((len(g[0]), cfg.n_samples)) if cfg.jitter else None
        return Batch(it, pix, *g, self.pixels.target[pix], jitter)

    def predict(self, env: EnvField, albedo: SurfaceAlbedo, b: Batch):
        rgb = render_cones(env, b.cones, self.cfg.n_samples, jitter=b.jitter, w_eps=self.cfg.w_eps, t_eps=self.cfg.t_eps).rgb
        n = len(b.pixels)
        pred = np.zeros((n, 3))
        for ch in range(3):
            pred[:, ch] = np.bincount(b.cone_owner, b.cone_coef * rgb[:, ch], minlength=n)
            if len(b.alb_points):
                pred[:, ch] += np.bincount(b.alb_owner, b.alb_coef * albedo(b.alb_points)[:, ch], minlength=n)
        return pred

    def loss_and_grads(self, env: EnvField, albedo: SurfaceAlbedo, b: Batch, need_grads: bool = True):
        """Photometric mean squared error plus TV terms; gradients for density, SH and albedo."""
        cfg = self.cfg
        pred = self.predict(env, albedo, b)
        resid = pred - b.target
        loss = float(np.mean(resid * resid))
        tv_d, g_tv_d = tv_loss(env.density) if cfg.tv_weight > 0 else (0.0, None)
        tv_s, g_tv_s = tv_loss(env.sh) if cfg.tv_sh_weight > 0 else (0.0, None)
        loss += cfg.tv_weight * tv_d + cfg.tv_sh_weight * tv_s
        if not need_grads:
            return loss, None
        g_pred = 2.0 * resid / resid.size
        g_rgb = g_pred[b.cone_owner] * b.cone_coef[:, None]
        gd, gs = backward(env, b.cones, g_rgb, cfg.n_samples, jitter=b.jitter, w_eps=cfg.w_eps, t_eps=cfg.t_eps)
        if g_tv_d is not None:
            gd += cfg.tv_weight * g_tv_d
        if g_tv_s is not None:
            gs += cfg.tv_sh_weight * g_tv_s
        grads = {"density": gd, "sh": gs}
        if cfg.fit_albedo and len(b.alb_points):
            grads["albedo"] = albedo.adjoint(b.alb_points, g_pred[b.alb_owner] * b.alb_coef[:, None])
        return loss, grads

    def theta_grad(self, env, albedo, it, theta) -> np.ndarray:
        """Central finite differences of the batch loss in the geometry parameters."""
        g = np.zeros_like(theta)
        h = self.cfg.fd_step
        for j in range(len(theta)):
            e = np.zeros_like(theta)
            e[j] = h
            lp, _ = self.loss_and_grads(env, albedo, self.batch(it, theta + e), need_grads=False)
            lm, _ = self.loss_and_grads(env, albedo, self.batch(it, theta - e), need_grads=False)
            g[j] = (lp - lm) / (2 * h)
        return g

    def new_state(self) -> FitState:
        cfg = self.cfg
        env = EnvField.create(cfg.resolution, *self.bounds, sh_degree=cfg.sh_degree,
                              init_density=cfg.init_density, init_rgb=cfg.init_rgb, opaque_far=cfg.opaque_far)
        tex = np.full((cfg.albedo_height, cfg.albedo_width, 3), float(cfg.init_albedo))
        albedo = SurfaceAlbedo(tex, self.scene.object.albedo_center)
        return FitState(env, albedo, self.theta0.copy())


@dataclass
class FitResult:
    field: EnvField
    albedo: SurfaceAlbedo
    theta: np.ndarray
    sdf: geo.Sdf
    loss_curve: np.ndarray
    info: dict
    seconds: float = 0.0  # wall time; kept out of written artefacts so they stay reproducible


def _save_state(path: Path, st: FitState, adam: Adam, adam_g: Adam) -> None:
    data = {
        "density": st.field.density, "sh": st.field.sh, "albedo": st.albedo.texture,
        "theta": st.theta, "iteration": np.array(st.iteration), "losses": np.array(st.losses, dtype=np.float64),
        **adam.state("adam"), **adam_g.state("adam_g"),
    }
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, **data)
    tmp.replace(path)


def _load_state(path: Path, st: FitState, adam: Adam, adam_g: Adam) -> None:
    with np.load(path) as d:
        st.field.density[...] = d["density"]
        st.field.sh[...] = d["sh"]
        st.albedo.texture[...] = d["albedo"]
        st.theta[...] = d["theta"]
        st.iteration = int(d["iteration"])
        st.losses = [float(x) for x in d["losses"]]
        adam.load("adam", d)
        adam_g.load("adam_g", d)


def fit(scene, views, cfg: FitConfig, run_dir=None, resume: bool = False, stop_at: int | None = None,
        force: bool = False, log=None) -> FitResult:
    """Adam on the photometric loss over random pixel batches.

    The batch and stratification jitter of iteration ``i`` come from
    ``default_rng([seed, i])``, so interrupted runs resumed from ``state.npz``
    reproduce the uninterrupted loss curve exactly.
    """
    t0 = time.time()
    prob = FitProblem(scene, views, cfg)
    spread = prob.check_baseline(force)
    st = prob.new_state()
    shapes = {"density": st.field.density.shape, "sh": st.field.sh.shape, "albedo": st.albedo.texture.shape}
    adam = Adam(shapes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_g = Adam({"theta": st.theta.shape}, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    run_dir = Path(run_dir) if run_dir is not None else None
    state_path = run_dir / "state.npz" if run_dir is not None else None
    if resume and state_path is not None and state_path.is_file():
        _load_state(state_path, st, adam, adam_g)
    end = cfg.iterations if stop_at is None else min(cfg.iterations, stop_at)
    params = {"density": st.field.density, "sh": st.field.sh, "albedo": st.albedo.texture}
    decay = np.log(cfg.lr_decay) / max(cfg.iterations - 1, 1)
    for it in range(st.iteration, end):
        scale = float(np.exp(decay * it))
        b = prob.batch(it, st.theta)
        loss, grads = prob.loss_and_grads(st.field, st.albedo, b)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(it, it)
        lr_d = cfg.lr_field if cfg.lr_density is None else cfg.lr_density
        adam.step(params, grads, {"density": lr_d * scale, "sh": cfg.lr_field * scale, "albedo": cfg.lr_albedo * scale})
        np.clip(st.albedo.texture, 0.0, 1.0, out=st.albedo.texture)
        if cfg.geometry == "refine" and it % cfg.geometry_every == 0:
            gt = prob.theta_grad(st.field, st.albedo, it, st.theta)
            if not np.all(np.isfinite(gt)):
                raise NonFiniteLoss(it, it)
            adam_g.step({"theta": st.theta}, {"theta": gt}, {"theta": cfg.lr_geometry * scale})
        st.losses.append(loss)
        st.iteration = it + 1
        if log is not None and (it % 50 == 0 or it == end - 1):
            log(f"iter {it:5d}  loss {loss:.6f}")
        if state_path is not None and cfg.checkpoint_every and st.iteration % cfg.checkpoint_every == 0:
            _save_state(state_path, st, adam, adam_g)
    if state_path is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _save_state(state_path, st, adam, adam_g)
    info = {
        "pixels": len(prob.pixels),
        "views": int(len(np.unique(prob.pixels.view))),
        "baseline_spread": spread,
        "iterations": st.iteration,
        "theta": [float(t) for t in st.theta],
        "params": list(prob.params),
    }
    return FitResult(st.field, st.albedo, st.theta.copy(), prob.sdf(st.theta), np.array(st.losses), info,
                     time.time() - t0)


def write_loss_curve(path, losses) -> None:
    lines = ["iter,loss"] + [f"{i},{float(l)!r}" for i, l in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_curve(path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def save_run(run_dir, result: FitResult, cfg: FitConfig) -> None:
    from .imageio import write_pfm, write_png

    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    save_field(result.field, run / "field.envf")
    write_pfm(run / "albedo.pfm", result.albedo.texture)
    write_png(run / "albedo.png", result.albedo.texture)
    write_loss_curve(run / "loss_curve.csv", result.loss_curve)
    meta = {"config": cfg.to_dict(), "theta": [float(t) for t in result.theta],
            "albedo_center": [float(c) for c in result.albedo.center], "info": result.info}
    (run / "fit.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_run(run_dir, scene) -> tuple[FitResult, FitConfig]:
    """Rebuild a finished fit from the artefacts written by :func:`save_run`."""
    from .env_field import load_field
    from .errors import CheckpointError
    from .imageio import read_pfm

    run = Path(run_dir)
    meta_path = run / "fit.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no fit.json in {run}")
    meta = json.loads(meta_path.read_text())
    cfg = FitConfig.from_dict(meta["config"])
    field_ = load_field(run / "field.envf")
    albedo = SurfaceAlbedo(np.clip(read_pfm(run / "albedo.pfm").astype(np.float64), 0.0, 1.0), meta["albedo_center"])
    theta = np.array(meta["theta"], dtype=np.float64)
    sdf = scene.sdf.with_theta(theta) if len(theta) else scene.sdf
    losses = read_loss_curve(run / "loss_curve.csv")
    return FitResult(field_, albedo, theta, sdf, losses, meta.get("info", {})), cfg


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------


def predict_layers(scene, sdf, env: EnvField, albedo: SurfaceAlbedo, camera, cfg: FitConfig, n_samples=None) -> dict:
    """Predicted diffuse / specular / mixed layers and normals (surface path, pixel centres)."""
    n_samples = n_samples or cfg.n_samples
    ii, jj = camera.pixel_grid()
    d = camera.directions(ii + 0.5, jj + 0.5)
    eu, ev = camera.cone_frames(d)
    P = len(d)
    o = np.broadcast_to(camera.origin, (P, 3))
    cones = vs.build_virtual_cones(sdf, o, d, camera.rdot * cfg.rdot_scale, eu, ev, cfg.cone, scene.geometry)
    hits = geo.intersect_batch(sdf, o, d, 0.0, 1e3, scene.geometry, with_curvature=False)
    diffuse = np.zeros((P, 3))
    specular = np.zeros((P, 3))
    h = hits.valid
    diffuse[h] = scene.object.irradiance * albedo(hits.point[h])
    ok = np.nonzero(cones.valid)[0]
    if len(ok):
        cs = make_cones(env, cones.apex[ok], cones.axis[ok], cones.rdot[ok], near=cones.near[ok] + cfg.near_offset)
        specular[ok] = scene.object.rho_s * render_cones(env, cs, n_samples).rgb
    direct = np.zeros((P, 3))
    miss = np.nonzero(~h)[0]
    if len(miss):
        direct[miss] = render_cones(env, make_cones(env, o[miss], d[miss], camera.rdot), n_samples).rgb
    normals = np.where(h[:, None], hits.normal, 0.0)
    H, W = camera.height, camera.width
    return {
        "diffuse": diffuse.reshape(H, W, 3),
        "specular": specular.reshape(H, W, 3),
        "mixed": np.where(h[:, None], diffuse + specular, direct).reshape(H, W, 3),
        "normal": normals.reshape(H, W, 3),
        "mask": h.reshape(H, W),
    }


def gt_environment_view(scene, camera) -> np.ndarray:
    """Exact environment radiance along pixel-centre rays (object ignored)."""
    ii, jj = camera.pixel_grid()
    d = camera.directions(ii + 0.5, jj + 0.5)
    return scene.environment.radiance(np.broadcast_to(camera.origin, d.shape), d).reshape(camera.height, camera.width, 3)


def novel_near(scene, camera) -> float:
    """Start novel-view cones outside the object when the camera sits inside it."""
    c, r = geo.bounding_sphere(scene.sdf)
    if np.isfinite(r) and np.linalg.norm(camera.origin - c) < r:
        return float(r)
    return 0.0


def evaluate(scene, result: FitResult, cfg: FitConfig, views, novel_cameras=(), n_samples: int | None = None) -> Metrics:
    """Held-out layer metrics (object pixels) plus beyond-FoV novel-view metrics.

    Layer PSNR/SSIM are computed over pixels fully covered by the object in the
    ground truth; ``mixed_full`` also includes the directly seen environment.
    """
    acc = {k: [] for k in ("diffuse", "specular", "mixed", "mixed_full")}
    maes = []
    for v in views:
        pred = predict_layers(scene, result.sdf, result.field, result.albedo, v.camera, cfg, n_samples)
        gt = {"diffuse": v.layer("diffuse_gt"), "specular": v.layer("specular_gt"), "mixed": v.layer("mixed")}
        mask = v.layer("mask") >= 1.0
        for k in ("diffuse", "specular", "mixed"):
            acc[k].append((psnr(pred[k], gt[k], mask=mask), ssim(pred[k], gt[k], mask=mask)))
        acc["mixed_full"].append((psnr(pred["mixed"], gt["mixed"]), ssim(pred["mixed"], gt["mixed"])))
        m = mask & pred["mask"]
        if m.any():
            maes.append(normal_mae(pred["normal"], v.layer("normal_gt"), m))
    metrics = Metrics()
    for k, vals in acc.items():
        if vals:
            arr = np.array(vals)
            metrics.layers[k] = LayerMetrics(float(np.mean(arr[:, 0])), float(np.mean(arr[:, 1])))
    metrics.normal_mae = float(np.mean(maes)) if maes else None
    for i, cam in enumerate(novel_cameras):
        img, _ = render_novel_view(result.field, cam, n_samples or cfg.n_samples, near=novel_near(scene, cam))
        gt = gt_environment_view(scene, cam)
        metrics.layers[f"novel_{i}"] = LayerMetrics(psnr(img, gt), ssim(img, gt))
    metrics.extra["heldout_views"] = len(views)
    return metrics


@dataclass
class EvalConfig:
    """Evaluation settings: beyond-FoV novel cameras and quadrature samples."""

    novel: list = field(default_factory=list)  # camera dicts; empty -> one upward view from the object centre
    n_samples: int = 64
    novel_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - {"novel", "n_samples", "novel_size"}
        if unknown:
            raise ConfigError("unknown eval option", sorted(unknown)[0])
        novel = d.get("novel", [])
        if not isinstance(novel, list) or not all(isinstance(c, dict) for c in novel):
            raise ConfigError("expected a list of camera tables", "eval.novel")
        n = d.get("n_samples", 64)
        size = d.get("novel_size", 64)
        for name, v in (("eval.n_samples", n), ("eval.novel_size", size)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 2:
                raise ConfigError("expected an integer >= 2", name)
        return cls(novel, n, size)

    @classmethod
    def load(cls, path) -> "EvalConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}", "config")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML syntax error: {exc}", "config") from exc
        return cls.from_dict(data.get("eval", {}))

    def cameras(self, scene) -> list:
        from .camera import Camera

        if not self.novel:
            c, _ = geo.bounding_sphere(scene.sdf)
            c = np.where(np.isfinite(c), c, 0.0)
            return [Camera.look_at(c, c + np.array([0.0, 0.0, 1.0]), self.novel_size, self.novel_size, 90.0, up=(0.0, 1.0, 0.0))]
        cams = []
        for i, d in enumerate(self.novel):
            try:
                cams.append(Camera.from_dict({"width": self.novel_size, "height": self.novel_size, "fov_deg": 90.0, **d}))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad camera: {exc}", f"eval.novel[{i}]") from exc
        return cams


def run_fit(scene, dataset, cfg: FitConfig, out_dir, eval_cfg: EvalConfig | None = None, resume: bool = False,
            stop_at: int | None = None, force: bool = False, log=None) -> tuple[FitResult, Metrics | None]:
    """Fit on the training split, write run artefacts and, if the fit finished, the metric report."""
    from .metrics import write_report

    eval_cfg = eval_cfg or EvalConfig()
    out = Path(out_dir)
    train, test = dataset.split(cfg.holdout_every)
    result = fit(scene, train, cfg, run_dir=out, resume=resume, stop_at=stop_at, force=force, log=log)
    save_run(out, result, cfg)
    if len(result.loss_curve) < cfg.iterations:
        return result, None
    metrics = evaluate(scene, result, cfg, test, eval_cfg.cameras(scene), eval_cfg.n_samples)
    info = {
        **result.info,
        "scene_hash": dataset.scene_hash,
        "train_views": [v.index for v in train],
        "heldout_views": [v.index for v in test],
        "final_loss": float(result.loss_curve[-1]) if len(result.loss_curve) else None,
    }
    write_report(out / "report.json", metrics, info)
    return result, metrics
