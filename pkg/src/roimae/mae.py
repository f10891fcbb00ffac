"""Desk-scale masked autoencoder over spatiotemporal patches.

Each volume is cut into non-overlapping ``(px, py, pz, pt)`` patches. A
patch-wise MLP encodes every token to a latent vector and decodes it back::

    h1 = tanh(x @ W1 + b1)      encoder
    z  = h1 @ W2 + b2           latent
    h2 = tanh(z @ W3 + b3)      decoder
    y  = h2 @ W4 + b4

Gradients are derived by hand and checked against finite differences in the
test-suite. Parameters are stored as float32; forward and backward passes
run in float64.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atlas import GroupingTable
from .masking import MaskStrategy, apply_mask, generate_mask
from .rng import derive_seed, keyed_generator
from .volume import LabelVolume, Mask3D, Mask4D, Volume4D, brain_mask

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


class ShapeError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    px: int
    py: int
    pz: int
    pt: int = 1

    def __post_init__(self):
        if min(self.shape) < 1:
            raise ShapeError(f"patch dims must be positive, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.px, self.py, self.pz, self.pt)

    @property
    def d_patch(self) -> int:
        return self.px * self.py * self.pz * self.pt

    def token_grid(self, shape) -> tuple[int, int, int, int]:
        shape = tuple(shape)
        if len(shape) != 4 or any(n % p for n, p in zip(shape, self.shape)):
            raise ShapeError(f"volume shape {shape} is not divisible by patch {self.shape}")
        return tuple(n // p for n, p in zip(shape, self.shape))

    def n_tokens(self, shape) -> int:
        return int(np.prod(self.token_grid(shape)))


def patchify_array(array: np.ndarray, spec: PatchSpec) -> np.ndarray:
    gx, gy, gz, gt = spec.token_grid(array.shape)
    px, py, pz, pt = spec.shape
    blocks = array.reshape((px, gx, py, gy, pz, gz, pt, gt), order="F")
    blocks = blocks.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return np.ascontiguousarray(blocks.reshape((spec.d_patch, gx * gy * gz * gt), order="F").T)


def unpatchify_array(tokens: np.ndarray, spec: PatchSpec, shape) -> np.ndarray:
    gx, gy, gz, gt = spec.token_grid(shape)
    px, py, pz, pt = spec.shape
    if tokens.shape != (gx * gy * gz * gt, spec.d_patch):
        raise ShapeError(f"token matrix {tokens.shape} does not fit volume {tuple(shape)}")
    blocks = tokens.T.reshape((px, py, pz, pt, gx, gy, gz, gt), order="F")
    blocks = blocks.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return np.asfortranarray(blocks.reshape(tuple(shape), order="F"))


def patchify(vol: Volume4D, spec: PatchSpec) -> np.ndarray:
    """Token matrix ``(n_tokens, d_patch)``; tokens and within-patch voxels both x-fastest."""
    return patchify_array(vol.data, spec)


def unpatchify(tokens: np.ndarray, spec: PatchSpec, like: Volume4D) -> Volume4D:
    return like.replace(unpatchify_array(tokens, spec, like.data.shape))


def _glorot(rng, fan_in, fan_out) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class MaeModel:
    patch: PatchSpec
    d_hidden: int
    d_latent: int
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, patch: PatchSpec, d_hidden: int = 64, d_latent: int = 16, seed: int = 0) -> "MaeModel":
        rng = keyed_generator(seed, "mae-init", patch.shape, d_hidden, d_latent)
        d = patch.d_patch
        sizes = [(d, d_hidden), (d_hidden, d_latent), (d_latent, d_hidden), (d_hidden, d)]
        params = {}
        for i, (fan_in, fan_out) in enumerate(sizes, 1):
            params[f"W{i}"] = _glorot(rng, fan_in, fan_out)
            params[f"b{i}"] = np.zeros(fan_out, dtype=np.float32)
        return cls(patch, d_hidden, d_latent, params)

    @classmethod
    def zeros(cls, patch: PatchSpec, d_hidden: int, d_latent: int) -> "MaeModel":
        model = cls.init(patch, d_hidden, d_latent)
        return model.with_params({k: np.zeros_like(v) for k, v in model.params.items()})

    def with_params(self, params: dict) -> "MaeModel":
        return MaeModel(self.patch, self.d_hidden, self.d_latent, {k: params[k] for k in PARAM_NAMES})

    def astype(self, dtype) -> "MaeModel":
        return self.with_params({k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "MaeModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def _check_model(model: MaeModel, shape) -> None:
    model.patch.token_grid(shape)
    if model.params["W1"].shape != (model.patch.d_patch, model.d_hidden):
        raise ShapeError("model input layer does not match its patch spec")


def _forward_tokens(p: dict, x: np.ndarray) -> dict:
    h1 = np.tanh(x @ p["W1"] + p["b1"])
    z = h1 @ p["W2"] + p["b2"]
    h2 = np.tanh(z @ p["W3"] + p["b3"])
    y = h2 @ p["W4"] + p["b4"]
    return {"x": x, "h1": h1, "z": z, "h2": h2, "y": y}


def _backward_tokens(p: dict, cache: dict, dy: np.ndarray) -> dict:
    g = {}
    g["W4"] = cache["h2"].T @ dy
    g["b4"] = dy.sum(axis=0)
    da3 = (dy @ p["W4"].T) * (1.0 - cache["h2"] ** 2)
    g["W3"] = cache["z"].T @ da3
    g["b3"] = da3.sum(axis=0)
    dz = da3 @ p["W3"].T
    g["W2"] = cache["h1"].T @ dz
    g["b2"] = dz.sum(axis=0)
    da1 = (dz @ p["W2"].T) * (1.0 - cache["h1"] ** 2)
    g["W1"] = cache["x"].T @ da1
    g["b1"] = da1.sum(axis=0)
    return g


def _params64(model: MaeModel) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in model.params.items()}


def encode_tokens(model: MaeModel, tokens: np.ndarray) -> np.ndarray:
    p = _params64(model)
    return np.tanh(tokens.astype(np.float64) @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def forward(model: MaeModel, masked_vol: Volume4D) -> Volume4D:
    """Reconstruct a full volume from its masked input."""
    _check_model(model, masked_vol.data.shape)
    x = patchify(masked_vol, model.patch).astype(np.float64)
    y = _forward_tokens(_params64(model), x)["y"]
    return unpatchify(y.astype(np.float32), model.patch, masked_vol)


def masked_mse(recon: Volume4D, target: Volume4D, mask: Mask4D) -> float:
    """Mean of ``(recon - target)**2`` over masked voxels, accumulated in float64."""
    if recon.data.shape != target.data.shape or mask.bits.shape != target.data.shape:
        raise ShapeError("reconstruction, target and mask must share a grid")
    if mask.popcount == 0:
        raise ValueError("mask is empty; masked MSE is undefined")
    diff = recon.data[mask.bits].astype(np.float64) - target.data[mask.bits].astype(np.float64)
    return float((diff * diff).sum() / diff.size)


def loss_and_grads(
    model: MaeModel,
    masked_vol: Volume4D,
    target: Volume4D,
    mask: Mask4D,
    loss_on: str = "masked",
) -> tuple[float, dict]:
    """Masked MSE of ``forward(model, masked_vol)`` against ``target`` and its
    exact gradient with respect to every parameter (float64)."""
    shape = masked_vol.data.shape
    _check_model(model, shape)
    if target.data.shape != shape or mask.bits.shape != shape:
        raise ShapeError("masked input, target and mask must share a grid")
    if loss_on == "masked":
        weight = mask.bits
        count = mask.popcount
        if count == 0:
            raise ValueError("mask is empty; masked MSE is undefined")
    elif loss_on == "all":
        weight = np.ones(shape, dtype=bool)
        count = weight.size
    else:
        raise ValueError(f"loss_on must be 'masked' or 'all', got {loss_on!r}")

    p = _params64(model)
    spec = model.patch
    cache = _forward_tokens(p, patchify(masked_vol, spec).astype(np.float64))
    t = patchify_array(target.data, spec).astype(np.float64)
    w = patchify_array(weight, spec)
    # unselected voxels contribute an exact zero, whatever the target holds there
    resid = np.where(w, cache["y"] - np.where(w, t, 0.0), 0.0)
    loss = float((resid * resid).sum() / count)
    grads = _backward_tokens(p, cache, resid * (2.0 / count))
    return loss, grads


backward = loss_and_grads


@dataclass
class AdamWState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: MaeModel, **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = {k: np.zeros(v.shape) for k, v in model.params.items()}
        state.v = {k: np.zeros(v.shape) for k, v in model.params.items()}
        return state


def adamw_step(params: dict, state: AdamWState, grads: dict) -> tuple[dict, AdamWState]:
    """One AdamW update with decoupled weight decay. Inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDivergedError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        theta64 = theta.astype(np.float64)
        updated = theta64 - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta64)
        new_params[name] = updated.astype(theta.dtype)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_params, new_state


def model_adamw_step(model: MaeModel, state: AdamWState, grads: dict) -> tuple[MaeModel, AdamWState]:
    params, state = adamw_step(model.params, state, grads)
    model = model.with_params(params)
    if not model.is_finite():
        raise TrainingDivergedError(f"parameters became non-finite at step {state.step}")
    return model, state


def pairwise_sum(items: list):
    """Fixed-shape binary-tree reduction, independent of evaluation order."""
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        paired = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 24
    seed: int = 0
    lr: float = 5e-5
    weight_decay: float = 0.01
    d_hidden: int = 64
    d_latent: int = 32
    # one token = a 4^3 block over the whole 24-frame series
    patch: tuple[int, int, int, int] = (4, 4, 4, 24)
    resample_masks_per_epoch: bool = True
    shuffle: bool = True
    loss_on: str = "masked"
    fill: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(*self.patch)


def training_mask_seed(cfg: TrainConfig, epoch: int, index: int) -> int:
    """Sub-seed of the mask drawn for dataset item ``index`` in ``epoch``."""
    return derive_seed(cfg.seed, "mask", epoch if cfg.resample_masks_per_epoch else 0, index)


@dataclass
class PretrainResult:
    model: MaeModel
    losses: list
    state: AdamWState


def pretrain(
    dataset: list,
    strategy: MaskStrategy,
    cfg: TrainConfig,
    labels: LabelVolume | None = None,
    grouping: GroupingTable | None = None,
    brains: list | None = None,
    model: MaeModel | None = None,
) -> PretrainResult:
    """Train the autoencoder to fill in masked voxels.

    Every sample gets a fresh mask per epoch (unless
    ``cfg.resample_masks_per_epoch`` is off), keyed on ``(cfg.seed, epoch,
    index)``. Gradients are averaged over each batch by pairwise summation.
    Returns the final model and the per-epoch mean training loss.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0].data.shape
    if any(v.data.shape != shape for v in dataset):
        raise ShapeError("all volumes in a dataset must share a grid")
    if brains is None:
        brains = [brain_mask(v) for v in dataset]
    if model is None:
        model = MaeModel.init(cfg.patch_spec, cfg.d_hidden, cfg.d_latent, seed=cfg.seed)
    _check_model(model, shape)
    state = AdamWState.for_model(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    dims = dataset[0].dims
    losses = []
    for epoch in range(cfg.epochs):
        order = np.arange(len(dataset))
        if cfg.shuffle:
            order = keyed_generator(cfg.seed, "order", epoch).permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size].tolist()
            batch_grads = []
            for i in batch:
                mask = generate_mask(
                    strategy.with_seed(training_mask_seed(cfg, epoch, i)), dims, labels, brains[i], grouping
                )
                masked = apply_mask(dataset[i], mask, cfg.fill)
                loss, grads = loss_and_grads(model, masked, dataset[i], mask, cfg.loss_on)
                epoch_losses.append(loss)
                batch_grads.append(grads)
            mean_grads = {k: pairwise_sum([g[k] for g in batch_grads]) / len(batch) for k in PARAM_NAMES}
            model, state = model_adamw_step(model, state, mean_grads)
        losses.append(float(pairwise_sum([np.float64(x) for x in epoch_losses]) / len(epoch_losses)))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    return PretrainResult(model, losses, state)


def extract_features(model: MaeModel, vol: Volume4D) -> np.ndarray:
    """Mean-pooled latent of every token of the unmasked volume."""
    _check_model(model, vol.data.shape)
    return encode_tokens(model, patchify(vol, model.patch)).mean(axis=0)


# --- model file ------------------------------------------------------------
#
# little-endian: b"RMAE", u32 version, u32 px py pz pt, u32 d_patch d_hidden
# d_latent, then W1 b1 W2 b2 W3 b3 W4 b4 as float32, each C-order.

MODEL_MAGIC = b"RMAE"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sI4I3I")


def save_model(model: MaeModel, path) -> None:
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, *model.patch.shape, model.patch.d_patch, model.d_hidden, model.d_latent
    )
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in PARAM_NAMES)
    Path(path).write_bytes(header + blob)


def load_model(path) -> MaeModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise ValueError(f"{path}: too short for a model file")
    magic, version, px, py, pz, pt, d_patch, d_hidden, d_latent = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    patch = PatchSpec(px, py, pz, pt)
    if patch.d_patch != d_patch:
        raise ValueError(f"{path}: inconsistent patch size")
    shapes = {
        "W1": (d_patch, d_hidden), "b1": (d_hidden,),
        "W2": (d_hidden, d_latent), "b2": (d_latent,),
        "W3": (d_latent, d_hidden), "b3": (d_hidden,),
        "W4": (d_hidden, d_patch), "b4": (d_patch,),
    }
    offset = _MODEL_HEADER.size
    params = {}
    for k in PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        if offset + 4 * n > len(raw):
            raise ValueError(f"{path}: truncated parameter blob")
        params[k] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shapes[k]).astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return MaeModel(patch, d_hidden, d_latent, params)
