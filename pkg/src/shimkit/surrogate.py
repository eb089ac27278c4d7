"""Residual CNN that maps per-coil B1+ maps to shim weights, and its training loop.

The network sees ``2C`` input planes (real and imaginary part of every coil,
zeroed outside the mask) and emits ``2C`` numbers read as interleaved
real/imaginary shim weights. It is trained without ever looking at the
reference weights themselves: the loss pushes the predicted weights through
the field model, computes the slice RMSE, and penalises its absolute
distance to the RMSE of the reference solution.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .errors import DatasetError, DimensionError, DomainError, NumericalError, SpecError, UsageError
from .field import ShimWeights, SliceSample, canonicalize_phase, rmse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    coils: int = 8
    height: int = 64
    width: int = 64
    stem_width: int = 16
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) != 4:
            raise SpecError("stage_widths needs exactly four entries")
        if any(b != 2 * a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise SpecError(f"stage widths must double per stage, got {self.stage_widths}")
        if self.coils < 1 or self.blocks_per_stage < 1:
            raise SpecError("coils and blocks_per_stage must be >= 1")

    @property
    def input_channels(self) -> int:
        return 2 * self.coils

    @property
    def output_dim(self) -> int:
        return 2 * self.coils

    @classmethod
    def paper_scale(cls, **kw) -> "NetConfig":
        kw.setdefault("stem_width", 64)
        kw.setdefault("stage_widths", (64, 128, 256, 512))
        return cls(**kw)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 200
    lr: float = 1e-3
    decay_every: int = 50
    decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    eps_mag: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise SpecError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if self.batch_size < 2:
            raise SpecError("batch_size must be >= 2 (batch normalisation needs batch statistics)")
        if self.epochs < 0 or self.decay_every < 1:
            raise SpecError("epochs must be >= 0 and decay_every >= 1")

    def lr_at(self, epoch: int) -> float:
        """Step size in effect during 1-based ``epoch``."""
        return self.lr * self.decay ** ((epoch - 1) // self.decay_every)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, momentum, eps):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout, eps=eps, momentum=momentum)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, eps=eps, momentum=momentum)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False),
                nn.BatchNorm2d(cout, eps=eps, momentum=momentum),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ShimResNet(nn.Module):
    """3x3 stem, four stages of basic blocks (stride 2 from stage two on), pool, linear head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        mom, eps = cfg.bn_momentum, cfg.bn_eps
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.input_channels, cfg.stem_width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cfg.stem_width, eps=eps, momentum=mom),
            nn.ReLU(),
        )
        stages = []
        cin = cfg.stem_width
        for i, width in enumerate(cfg.stage_widths):
            blocks = []
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(cin, width, stride, mom, eps))
                cin = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(cin, cfg.output_dim)
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.cfg.seed)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.weight[0].numel()
                with torch.no_grad():
                    mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif isinstance(mod, nn.BatchNorm2d):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
                mod.reset_running_stats()
        with torch.no_grad():
            self.fc.weight.normal_(0.0, 1.0 / math.sqrt(self.fc.in_features), generator=gen)
            self.fc.bias.zero_()

    def forward(self, x):
        x = self.stages(self.stem(x))
        x = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return self.fc(x)


def build_network(cfg: NetConfig, dtype=torch.float32) -> ShimResNet:
    return ShimResNet(cfg).to(dtype)


def parameter_vector(net: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(net.parameters())


def encode_inputs(samples, dtype=torch.float32) -> torch.Tensor:
    """Stack samples into a ``(B, 2C, H, W)`` tensor, zero outside each mask."""
    planes = []
    for s in samples:
        data = s.b1.data * s.mask.bits[:, :, None]
        x = np.empty((2 * data.shape[2],) + data.shape[:2], dtype=np.float64)
        x[0::2] = np.moveaxis(data.real, 2, 0)
        x[1::2] = np.moveaxis(data.imag, 2, 0)
        planes.append(x)
    return torch.as_tensor(np.stack(planes), dtype=dtype)


def canonicalize_outputs(out: torch.Tensor) -> torch.Tensor:
    """Rotate every row of interleaved weights so coil 0 is real and non-negative."""
    re, im = out[:, 0::2], out[:, 1::2]
    r0, i0 = re[:, :1], im[:, :1]
    norm = torch.sqrt(r0 * r0 + i0 * i0)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    cr = torch.where(norm > 0, r0 / safe, torch.ones_like(norm))
    ci = torch.where(norm > 0, -i0 / safe, torch.zeros_like(norm))
    new_re = re * cr - im * ci
    new_im = re * ci + im * cr
    new_im[:, :1] = 0.0
    new_re[:, :1] = norm
    return torch.stack([new_re, new_im], dim=2).reshape(out.shape)


def forward(net: ShimResNet, inputs: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run the network. ``train`` mode records the graph and uses batch statistics;
    ``eval`` mode uses running statistics and returns canonicalised weights."""
    cfg = net.cfg
    expected = (cfg.input_channels, cfg.height, cfg.width)
    if inputs.ndim != 4 or tuple(inputs.shape[1:]) != expected:
        raise DimensionError(f"expected input (B, {expected}), got {tuple(inputs.shape)}")
    if mode == "train":
        if inputs.shape[0] < 2:
            raise DimensionError("train mode needs a batch of at least 2")
        net.train()
        return net(inputs)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    net.eval()
    with torch.no_grad():
        # conv kernels pick batch-size dependent code paths; one slice per call
        # keeps every prediction independent of what it was batched with
        return canonicalize_outputs(torch.cat([net(inputs[i:i + 1]) for i in range(inputs.shape[0])]))


class _FlooredAbs(torch.autograd.Function):
    """|y| whose derivative uses ``y / max(|y|, eps)`` so it stays finite at 0."""

    @staticmethod
    def forward(ctx, re, im, eps):
        mag = torch.sqrt(re * re + im * im)
        ctx.save_for_backward(re, im, mag)
        ctx.eps = eps
        return mag

    @staticmethod
    def backward(ctx, grad):
        re, im, mag = ctx.saved_tensors
        d = torch.clamp(mag, min=ctx.eps)
        return grad * re / d, grad * im / d, None


class PhysicsBatch:
    """Padded masked systems of a set of samples, ready for the loss.

    Holds ``A`` as real/imag tensors ``(B, N_max, C)``, voxel validity,
    targets, voxel counts and reference RMSEs.
    """

    def __init__(self, a_re, a_im, valid, target, counts, ref):
        self.a_re, self.a_im, self.valid = a_re, a_im, valid
        self.target, self.counts, self.ref = target, counts, ref

    @classmethod
    def from_samples(cls, samples, dtype=torch.float32, require_ref=True) -> "PhysicsBatch":
        systems = [s.system() for s in samples]
        if require_ref:
            missing = [s.key for s in samples if s.ref_rmse is None]
            if missing:
                raise DomainError(f"samples without ref_rmse: {missing[:5]}")
        nmax = max(a.shape[0] for a, _, _ in systems)
        c = systems[0][0].shape[1]
        b = len(systems)
        a_all = np.zeros((b, nmax, c), dtype=np.complex128)
        valid = np.zeros((b, nmax))
        target = np.zeros((b, nmax))
        for i, (a, m, _) in enumerate(systems):
            n = a.shape[0]
            a_all[i, :n] = a
            valid[i, :n] = 1.0
            target[i, :n] = m
        counts = np.array([a.shape[0] for a, _, _ in systems], dtype=np.float64)
        ref = np.array([np.nan if s.ref_rmse is None else s.ref_rmse for s in samples])
        t = lambda x: torch.as_tensor(x, dtype=dtype)
        return cls(t(a_all.real), t(a_all.imag), t(valid), t(target), t(counts), t(ref))

    def subset(self, idx) -> "PhysicsBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PhysicsBatch(self.a_re[idx], self.a_im[idx], self.valid[idx], self.target[idx],
                            self.counts[idx], self.ref[idx])

    def rmse(self, outputs: torch.Tensor, eps_mag: float = 1e-12) -> torch.Tensor:
        """Differentiable per-sample RMSE of interleaved weights ``outputs (B, 2C)``."""
        wr, wi = outputs[:, 0::2], outputs[:, 1::2]
        yr = torch.einsum("bnc,bc->bn", self.a_re, wr) - torch.einsum("bnc,bc->bn", self.a_im, wi)
        yi = torch.einsum("bnc,bc->bn", self.a_re, wi) + torch.einsum("bnc,bc->bn", self.a_im, wr)
        mag = _FlooredAbs.apply(yr, yi, eps_mag)
        resid = (mag - self.target) * self.valid
        return torch.sqrt((resid * resid).sum(dim=1) / self.counts)

    def loss(self, outputs: torch.Tensor, eps_mag: float = 1e-12) -> torch.Tensor:
        return (self.rmse(outputs, eps_mag) - self.ref).abs().mean()


def physics_loss(outputs: torch.Tensor, samples, eps_mag: float = 1e-12) -> torch.Tensor:
    """Mean absolute difference between predicted-weight RMSE and reference RMSE."""
    if outputs.ndim != 2 or outputs.shape[0] != len(samples):
        raise DimensionError(f"{tuple(outputs.shape)} outputs for {len(samples)} samples")
    batch = PhysicsBatch.from_samples(samples, dtype=outputs.dtype)
    return batch.loss(outputs, eps_mag)


def backward(net: nn.Module, loss: torch.Tensor, adjoint=1.0) -> dict:
    """Reverse-mode gradients of ``adjoint * loss`` for every named parameter."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise UsageError("backward needs a loss produced by a train-mode forward pass")
    names, params = zip(*net.named_parameters())
    seed = torch.as_tensor(adjoint, dtype=loss.dtype).expand_as(loss)
    grads = torch.autograd.grad(loss, params, grad_outputs=seed, retain_graph=True, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def split_indices(samples, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded train/val/test split that keeps augmented variants with their parent slice."""
    parents = sorted({s.parent for s in samples})
    rng = np.random.default_rng(seed)
    order = [parents[i] for i in rng.permutation(len(parents))]
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n_train + n_val > n:
        n_val = n - n_train
    groups = {p: g for g, part in enumerate((order[:n_train], order[n_train:n_train + n_val],
                                              order[n_train + n_val:])) for p in part}
    out = ([], [], [])
    for i, s in enumerate(samples):
        out[groups[s.parent]].append(i)
    return out


@dataclass
class TrainResult:
    net: ShimResNet
    log: list = field(default_factory=list)
    split: tuple = ((), (), ())
    best_epoch: int = 0


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def evaluate_loss(net, inputs, batch: PhysicsBatch, eps_mag=1e-12, chunk=256) -> float:
    net.eval()
    losses = []
    with torch.no_grad():
        for s in range(0, inputs.shape[0], chunk):
            out = net(inputs[s:s + chunk])
            idx = torch.arange(s, min(s + chunk, inputs.shape[0]))
            sub = batch.subset(idx)
            losses.append((sub.rmse(out, eps_mag) - sub.ref).abs())
    return float(torch.cat(losses).mean()) if losses else float("nan")


def train(samples, net_cfg: NetConfig, train_cfg: TrainConfig = TrainConfig(), split=None,
          progress=None) -> TrainResult:
    """Train on the training split with Adam and a step-decay schedule.

    Keeps the parameters of the epoch with the lowest validation loss (or
    training loss when there is no validation split).
    """
    torch.use_deterministic_algorithms(True)
    split = split or split_indices(samples, train_cfg.ratios, train_cfg.seed)
    train_idx, val_idx, _ = split
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]
    if len(train_set) < 2:
        raise DomainError("training split needs at least two samples")
    net = build_network(net_cfg)
    x_train = encode_inputs(train_set)
    p_train = PhysicsBatch.from_samples(train_set)
    x_val = encode_inputs(val_set) if val_set else None
    p_val = PhysicsBatch.from_samples(val_set) if val_set else None
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.lr, betas=(train_cfg.beta1, train_cfg.beta2),
                           eps=train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)
    best_state = copy.deepcopy(net.state_dict())
    best_score, best_epoch = math.inf, 0
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        lr = train_cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        total, seen = 0.0, 0
        for step, idx in enumerate(_batches(len(train_set), train_cfg.batch_size, rng)):
            idx_t = torch.as_tensor(idx, dtype=torch.long)
            out = forward(net, x_train[idx_t], "train")
            loss = p_train.subset(idx_t).loss(out, train_cfg.eps_mag)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}",
                                     {"epoch": epoch, "step": step})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / seen}
        if x_val is not None:
            entry["val_loss"] = evaluate_loss(net, x_val, p_val, train_cfg.eps_mag)
        score = entry.get("val_loss", entry["train_loss"])
        if score < best_score:
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(net.state_dict())
        history.append(entry)
        if progress:
            progress(entry)
    net.load_state_dict(best_state)
    net.eval()
    return TrainResult(net=net, log=history, split=tuple(tuple(s) for s in split), best_epoch=best_epoch)


def predict(net: ShimResNet, sample: SliceSample):
    """Shim weights for one slice, their RMSE, and the wall time of the forward pass."""
    x = encode_inputs([sample])
    t0 = time.perf_counter()
    out = forward(net, x, "eval")
    wall = time.perf_counter() - t0
    weights = ShimWeights.from_real(out[0].double().numpy())
    return weights, rmse(sample.b1, sample.mask, sample.target, weights), wall


def predict_batch(net: ShimResNet, samples) -> list[ShimWeights]:
    out = forward(net, encode_inputs(samples), "eval")
    return [ShimWeights.from_real(row.double().numpy()) for row in out]


CKPT_MAGIC = b"SHIMCKPT"
CKPT_VERSION = (1, 0)


def save_checkpoint(net: ShimResNet, path, extra: dict | None = None):
    """Write parameters and buffers as little-endian float32 behind a JSON header."""
    state = net.state_dict()
    entries, blobs = [], []
    for name, tensor in state.items():
        if name.endswith("num_batches_tracked"):
            continue
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format": "shimkit-checkpoint",
        "version": "%d.%d" % CKPT_VERSION,
        "tool_version": __version__,
        "net": asdict(net.cfg),
        "tensors": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expect: NetConfig | None = None):
    """Read a checkpoint; returns ``(net, header)``. Refuses a mismatched ``expect`` config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise DatasetError(f"{path}: not a shimkit checkpoint")
    if len(blob) < 12:
        raise DatasetError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + n])
    except ValueError as exc:
        raise DatasetError(f"{path}: corrupt checkpoint header ({exc})") from None
    major = int(header["version"].split(".")[0])
    if major != CKPT_VERSION[0]:
        raise DatasetError(f"{path}: checkpoint version {header['version']} is not supported")
    cfg = NetConfig(**header["net"])
    if expect is not None and expect != cfg:
        raise DatasetError(f"{path}: checkpoint config {cfg} does not match requested {expect}")
    net = build_network(cfg)
    state = net.state_dict()
    offset = 12 + n
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * count
        if end > len(blob):
            raise DatasetError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(blob):
        raise DatasetError(f"{path}: {len(blob) - offset} trailing bytes")
    net.load_state_dict(state)
    net.eval()
    return net, header
