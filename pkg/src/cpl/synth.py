"""Seeded synthetic clean images and parametric degradations.

All randomness flows from explicit integer seeds through
``numpy.random.SeedSequence``, so every image is a pure function of its seed
and spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .numerics import Tensor


class Task(str, Enum):
    NOISE = "noise"
    RAIN = "rain"
    HAZE = "haze"
    BLUR = "blur"
    LOWLIGHT = "lowlight"


TASKS = tuple(t.value for t in Task)
NOISE_LEVELS = (15, 25, 50)
BLUR_SIZES = (3, 5, 7)
BLUR_KINDS = ("box", "motion")

# Sampling ranges used when a spec is drawn at random. Lists of two numbers are
# closed intervals; "sigma", "size" and "kind" are choice sets.
DEFAULT_RANGES: dict[str, dict[str, list]] = {
    "noise": {"sigma": [15, 25, 50]},
    "rain": {"count": [6, 14], "angle": [60.0, 120.0], "length": [4, 10], "intensity": [0.5, 0.9]},
    "haze": {"t": [0.3, 0.8], "airlight": [0.7, 1.0]},
    "blur": {"size": [3, 5, 7], "kind": ["box", "motion"]},
    "lowlight": {"gamma": [2.0, 3.0], "scale": [0.1, 0.5]},
}


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    task: Task
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "task", Task(self.task))
        except ValueError:
            raise DegradationError(f"unknown task {self.task!r}; expected one of {TASKS}") from None
        validate_params(self.task, self.params)

    def to_json(self) -> dict:
        return {"task": self.task.value, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, d: dict) -> "DegradationSpec":
        return cls(Task(d["task"]), dict(d["params"]), int(d["seed"]))


@dataclass
class SampleTriple:
    degraded: Tensor
    clean: Tensor
    task: Task
    spec: DegradationSpec


def _need(params: dict, keys: tuple[str, ...], task: Task) -> None:
    missing = [k for k in keys if k not in params]
    if missing:
        raise DegradationError(f"{task.value}: missing params {missing}")
    extra = sorted(set(params) - set(keys))
    if extra:
        raise DegradationError(f"{task.value}: unknown params {extra}")


def _in(name: str, value: float, lo: float, hi: float, task: Task, lo_open: bool = False) -> None:
    ok = (lo < value if lo_open else lo <= value) and value <= hi
    if not ok or not math.isfinite(value):
        bracket = "(" if lo_open else "["
        raise DegradationError(f"{task.value}: {name}={value} outside {bracket}{lo}, {hi}]")


def validate_params(task: Task, p: dict) -> None:
    if task is Task.NOISE:
        _need(p, ("sigma",), task)
        if p["sigma"] not in NOISE_LEVELS:
            raise DegradationError(f"noise: sigma must be one of {NOISE_LEVELS} (in 1/255 units), got {p['sigma']}")
    elif task is Task.RAIN:
        _need(p, ("count", "angle", "length", "intensity"), task)
        if int(p["count"]) != p["count"] or p["count"] < 1:
            raise DegradationError(f"rain: count must be a positive integer, got {p['count']}")
        _in("angle", p["angle"], 60.0, 120.0, task)
        _in("length", p["length"], 1.0, 1e4, task)
        _in("intensity", p["intensity"], 0.0, 1.0, task, lo_open=True)
    elif task is Task.HAZE:
        _need(p, ("t", "airlight"), task)
        # t = 0 is accepted as the full-haze limit
        _in("t", p["t"], 0.0, 1.0, task)
        _in("airlight", p["airlight"], 0.7, 1.0, task)
    elif task is Task.BLUR:
        _need(p, ("size", "kind", "direction"), task)
        if p["size"] not in BLUR_SIZES:
            raise DegradationError(f"blur: size must be one of {BLUR_SIZES}, got {p['size']}")
        if p["kind"] not in BLUR_KINDS:
            raise DegradationError(f"blur: kind must be one of {BLUR_KINDS}, got {p['kind']!r}")
        if p["direction"] not in (0, 45, 90, 135):
            raise DegradationError(f"blur: direction must be 0, 45, 90 or 135, got {p['direction']}")
    elif task is Task.LOWLIGHT:
        _need(p, ("gamma", "scale"), task)
        _in("gamma", p["gamma"], 2.0, 3.0, task)
        _in("scale", p["scale"], 0.1, 0.5, task)


def _rng(seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and a spawn key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


# --------------------------------------------------------------------------
# clean images


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def gen_clean(seed: int, size: int, channels: int = 3) -> Tensor:
    """Composite of smooth random fields, a colour gradient and a few shapes."""
    if size < 16:
        raise ValueError(f"gen_clean needs size >= 16, got {size}")
    rng = _rng(seed, 0)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)

    img = np.empty((channels, size, size))
    for c in range(channels):
        coarse = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="wrap")
        img[c] = 0.2 + 0.6 * _normalize(coarse)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = _normalize(np.cos(theta) * xx + np.sin(theta) * yy)
    c0, c1 = rng.uniform(0, 1, size=(2, channels))
    grad_img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    img = 0.6 * img + 0.4 * grad_img

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=channels)[:, None, None]
        alpha = rng.uniform(0.5, 1.0)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r * rng.uniform(0.4, 1.0))
        img = np.where(mask, (1 - alpha) * img + alpha * color, img)

    texture = ndimage.gaussian_filter(rng.normal(size=(channels, size, size)), sigma=(0, 0.8, 0.8), mode="wrap")
    img = img + 0.05 * texture / (texture.std() + 1e-12)
    return Tensor(np.clip(img, 0.0, 1.0))


# --------------------------------------------------------------------------
# degradations


def sample_spec(task, seed: int, ranges: dict | None = None) -> DegradationSpec:
    """Draw a spec for ``task`` from ``ranges``; tasks or keys missing from
    ``ranges`` fall back to DEFAULT_RANGES."""
    task = Task(task)
    r = {**DEFAULT_RANGES[task.value], **(ranges or {}).get(task.value, {})}
    rng = _rng(seed, 1)

    def uni(key):
        lo, hi = r[key]
        return float(rng.uniform(lo, hi))

    def choice(key):
        opts = list(r[key])
        return opts[int(rng.integers(len(opts)))]

    if task is Task.NOISE:
        params = {"sigma": int(choice("sigma"))}
    elif task is Task.RAIN:
        lo, hi = r["count"]
        params = {
            "count": int(rng.integers(lo, hi + 1)),
            "angle": uni("angle"),
            "length": uni("length"),
            "intensity": uni("intensity"),
        }
    elif task is Task.HAZE:
        params = {"t": uni("t"), "airlight": uni("airlight")}
    elif task is Task.BLUR:
        params = {"size": int(choice("size")), "kind": choice("kind"), "direction": int(rng.choice([0, 45, 90, 135]))}
    else:
        params = {"gamma": uni("gamma"), "scale": uni("scale")}
    return DegradationSpec(task, params, int(seed))


def blur_kernel(size: int, kind: str, direction: int = 0) -> np.ndarray:
    if kind == "box":
        return np.full((size, size), 1.0 / (size * size))
    k = np.zeros((size, size))
    c = size // 2
    for i in range(-c, c + 1):
        if direction == 0:
            k[c, c + i] = 1
        elif direction == 90:
            k[c + i, c] = 1
        elif direction == 45:
            k[c - i, c + i] = 1
        else:
            k[c + i, c + i] = 1
    return k / k.sum()


def rain_layer(shape: tuple[int, int], params: dict, seed: int) -> np.ndarray:
    """Streak mask in [0, 1]: ``count`` line segments at ``angle`` degrees
    from the horizontal axis (90 is vertical)."""
    H, W = shape
    rng = _rng(seed, 2)
    layer = np.zeros((H, W))
    length = params["length"]
    for _ in range(int(params["count"])):
        ang = math.radians(params["angle"] + rng.uniform(-3.0, 3.0))
        dx, dy = math.cos(ang), -math.sin(ang)
        x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
        brightness = rng.uniform(0.7, 1.0)
        ts = np.arange(0.0, length, 0.5)
        xs = np.round(x0 + ts * dx).astype(int) % W
        ys = np.round(y0 + ts * dy).astype(int) % H
        layer[ys, xs] = np.maximum(layer[ys, xs], brightness)
    return layer


def apply_degradation(clean: Tensor, spec: DegradationSpec, clip: bool = True) -> Tensor:
    """Corrupt ``clean`` (C x H x W in [0, 1]) according to ``spec``.

    ``clip=False`` returns the pre-clipping value, which is only meaningful for
    inspecting the noise model.
    """
    img = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise DegradationError("clean image must lie in [0, 1]")
    validate_params(spec.task, spec.params)
    p = spec.params
    task = spec.task
    if task is Task.NOISE:
        rng = _rng(spec.seed, 3)
        out = img + rng.normal(0.0, p["sigma"] / 255.0, size=img.shape)
    elif task is Task.RAIN:
        out = img + p["intensity"] * rain_layer(img.shape[-2:], p, spec.seed)[None]
    elif task is Task.HAZE:
        t, A = p["t"], p["airlight"]
        out = img * t + A * (1.0 - t)
    elif task is Task.BLUR:
        k = blur_kernel(p["size"], p["kind"], p["direction"])
        out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in img])
    else:
        out = img ** p["gamma"] * p["scale"]
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return Tensor(out)


# --------------------------------------------------------------------------
# batches


def augment(arr: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 dihedral transforms: bit 0 flips left-right, bit 1 flips
    up-down, bits 2+ count 90 degree rotations (only 0 or 1 needed with flips)."""
    out = arr
    if code & 1:
        out = out[..., :, ::-1]
    if code & 2:
        out = out[..., ::-1, :]
    if code & 4:
        out = np.rot90(out, 1, axes=(-2, -1))
    return np.ascontiguousarray(out)


def make_sample(task, seed: int, crop: int, gen_size: int | None = None, ranges: dict | None = None, augment_data: bool = True) -> SampleTriple:
    gen_size = gen_size or max(16, 2 * crop)
    if crop > gen_size:
        raise ValueError(f"crop {crop} exceeds generated size {gen_size}")
    spec = sample_spec(task, derive_seed(seed, 10), ranges)
    full = gen_clean(derive_seed(seed, 11), gen_size)
    rng = _rng(seed, 12)
    y, x = rng.integers(0, gen_size - crop + 1, size=2)
    code = int(rng.integers(8)) if augment_data else 0
    # degrade the patch itself so that sparse degradations (rain) always land in it
    clean = Tensor(np.ascontiguousarray(full.data[:, y : y + crop, x : x + crop]))
    degraded = apply_degradation(clean, spec)
    d = augment(degraded.data, code)
    c = augment(clean.data, code)
    return SampleTriple(Tensor(d), Tensor(c), spec.task, spec)


def make_batch(task_mix, batch_size: int, crop: int = 32, seed: int = 0, gen_size: int | None = None, ranges: dict | None = None, augment_data: bool = True) -> list[SampleTriple]:
    """Task-balanced batch: sample i gets task ``task_mix[i % len(task_mix)]``
    and its own seed derived from ``(seed, i)``."""
    task_mix = [Task(t) for t in task_mix]
    if not task_mix:
        raise ValueError("task_mix must not be empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [
        make_sample(task_mix[i % len(task_mix)], derive_seed(seed, i), crop, gen_size, ranges, augment_data)
        for i in range(batch_size)
    ]
