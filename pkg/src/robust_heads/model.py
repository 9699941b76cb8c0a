"""Layered classifiers, the partitioned three-head student and frozen teachers.

A network is a flat list of "layers" (conv blocks, residual MLP blocks and a
final linear classifier). Partitioning cuts that list into a frozen backbone,
a shared tunable section and a head section that is replicated three times.
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import hashlib
import io
import json
import math
import zipfile
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, ImmutabilityError, ValidationError

HEADS = ("clean", "combined", "unclean")
SECTION_NAMES = {"clean": "head_c", "combined": "head_m", "unclean": "head_u"}
DEFAULT_DROPOUT = 0.25


# ---------------------------------------------------------------------------
# Architectures


def student_arch(num_classes: int = 10, in_channels: int = 1) -> list[dict]:
    """~107k-parameter, 20-layer conv classifier."""
    convs = [(in_channels, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 32, 1), (32, 48, 2), (48, 48, 1), (48, 48, 1)]
    arch = [{"type": "conv", "cin": a, "cout": b, "stride": s} for a, b, s in convs]
    arch[-1]["pool"] = True
    arch += [{"type": "res", "dim": 48} for _ in range(11)]
    arch.append({"type": "linear", "din": 48, "dout": num_classes})
    return arch


def teacher_arch(num_classes: int = 10, in_channels: int = 1) -> list[dict]:
    """~28k-parameter, 5-layer conv classifier."""
    convs = [(in_channels, 16, 1), (16, 32, 2), (32, 32, 1), (32, 48, 2)]
    arch = [{"type": "conv", "cin": a, "cout": b, "stride": s} for a, b, s in convs]
    arch[-1]["pool"] = True
    arch.append({"type": "linear", "din": 48, "dout": num_classes})
    return arch


def mlp_arch(din: int, width: int, depth: int, num_classes: int) -> list[dict]:
    """Small flat-input network, mostly for gradient checks."""
    arch = [{"type": "dense", "din": din, "dout": width}]
    arch += [{"type": "res", "dim": width} for _ in range(depth - 2)]
    arch.append({"type": "linear", "din": width, "dout": num_classes})
    return arch


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, pool=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.conv(x))
        if self.pool:
            x = x.mean(dim=(2, 3))
        return x


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.fc = nn.Linear(dim, dim)

    def forward(self, x):
        return x + F.relu(self.fc(x))


class Dense(nn.Module):
    def __init__(self, din, dout):
        super().__init__()
        self.fc = nn.Linear(din, dout)

    def forward(self, x):
        return F.relu(self.fc(x.flatten(1)))


def make_layer(spec: dict) -> nn.Module:
    kind = spec["type"]
    if kind == "conv":
        return ConvBlock(spec["cin"], spec["cout"], spec.get("stride", 1), spec.get("pool", False))
    if kind == "res":
        return ResBlock(spec["dim"])
    if kind == "dense":
        return Dense(spec["din"], spec["dout"])
    if kind == "linear":
        return nn.Linear(spec["din"], spec["dout"])
    raise ValidationError(f"unknown layer type {kind!r}")


class LayeredNet(nn.Module):
    """Plain classifier: layers applied in order, the last one emits logits."""

    def __init__(self, arch: Sequence[dict], seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.arch = [dict(a) for a in arch]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layers = nn.ModuleList(make_layer(a) for a in self.arch)
        self.to(dtype)

    @property
    def num_classes(self) -> int:
        return self.arch[-1]["dout"]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Partitioning


@dataclasses.dataclass(frozen=True)
class PartitionConfig:
    fraction_tuned: float = 0.10
    head_fraction: float = 0.2
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not 0.0 <= self.fraction_tuned <= 1.0:
            raise ValidationError("fraction_tuned must be in [0, 1]")
        if not 0.0 < self.head_fraction < 1.0:
            raise ValidationError("head_fraction must be in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")


def _round_half_down(x: float) -> int:
    return max(0, math.ceil(x - 0.5 - 1e-9))


@dataclasses.dataclass(frozen=True)
class Split:
    depth: int
    n_backbone: int
    n_shared: int
    n_head: int
    frozen: bool = False

    @property
    def n_tuned(self) -> int:
        return 0 if self.frozen else self.n_shared + self.n_head


def compute_split(depth: int, config: PartitionConfig) -> Split:
    """Layer counts for backbone / shared / head.

    ``fraction_tuned * depth`` rounds to the nearest layer count, ties toward
    fewer tuned layers; the head takes the same rounding of ``head_fraction``
    of the tuned region, never less than the classifier layer. A fraction of
    exactly 0 gives a fully frozen model whose heads are the classifier layer.
    """
    if depth < 3:
        raise ConfigurationError("partitioning needs at least 3 layers")
    if config.fraction_tuned == 0.0:
        return Split(depth, depth - 1, 0, 1, frozen=True)
    n_tuned = _round_half_down(config.fraction_tuned * depth)
    if n_tuned == 0:
        raise ConfigurationError(
            f"fraction_tuned={config.fraction_tuned} rounds to 0 tuned layers of {depth} "
            f"while head_fraction={config.head_fraction} > 0"
        )
    n_head = min(n_tuned, max(1, _round_half_down(config.head_fraction * n_tuned)))
    return Split(depth, depth - n_tuned, n_tuned - n_head, n_head)


# ---------------------------------------------------------------------------
# Dropout with explicit generators


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout; a no-op when ``generator`` is None or ``p == 0``."""
    if generator is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (2**63))


_STREAMS = {"clean": 0, "combined": 1, "unclean": 2, "shared": 3}


@functools.lru_cache(maxsize=4096)
def _head_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(seed), _STREAMS[stream]]).generate_state(1)[0])


class MultiHeadModel(nn.Module):
    """Frozen backbone, shared tunable section and one or three parallel heads.

    Dropout follows every tuned layer except the logit layer and is active
    only when a generator is passed, so the default forward is deterministic.
    """

    def __init__(self, arch, split: Split, heads: Sequence[str] = HEADS, dropout_rate=DEFAULT_DROPOUT):
        super().__init__()
        self.arch = [dict(a) for a in arch]
        self.split = split
        self.head_names = tuple(heads)
        self.dropout_rate = float(dropout_rate)
        self.backbone = nn.ModuleList()
        self.shared = nn.ModuleList()
        self.heads = nn.ModuleDict({h: nn.ModuleList() for h in self.head_names})
        self.frozen_model = split.n_tuned == 0

    # construction helpers -------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.arch[-1]["dout"]

    @property
    def dtype(self) -> torch.dtype:
        return self.heads[self.head_names[0]][-1].weight.dtype

    def tunable_parameters(self) -> list[nn.Parameter]:
        if self.frozen_model:
            return []
        params = list(self.shared.parameters())
        for h in self.head_names:
            params += list(self.heads[h].parameters())
        return params

    def section_modules(self) -> dict[str, nn.Module]:
        out = {"backbone": self.backbone, "shared": self.shared}
        for h in self.head_names:
            out[SECTION_NAMES[h]] = self.heads[h]
        return out

    def freeze_backbone(self):
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        if self.frozen_model:
            for p in self.parameters():
                p.requires_grad_(False)

    def check_backbone_untouched(self):
        """Raise if any gradient reached the backbone."""
        for name, p in self.backbone.named_parameters():
            if p.requires_grad or p.grad is not None:
                raise ImmutabilityError(f"backbone parameter {name} received a gradient")

    # forward --------------------------------------------------------------
    def features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            for layer in self.backbone:
                x = layer(x)
        return x

    def shared_forward(self, h, generator=None):
        p = 0.0 if self.frozen_model else self.dropout_rate
        for layer in self.shared:
            h = dropout(layer(h), p, generator)
        return h

    def head_forward(self, h, head: str, generator=None):
        p = 0.0 if self.frozen_model else self.dropout_rate
        layers = self.heads[head]
        for i, layer in enumerate(layers):
            h = layer(h)
            if i < len(layers) - 1:
                h = dropout(h, p, generator)
        return h

    def tail(self, h, head: str, generator=None):
        return self.head_forward(self.shared_forward(h, generator), head, generator)

    def forward(self, x, head: str = "clean", generator=None):
        return self.tail(self.features(x), head, generator)

    def mc_probs(self, h: torch.Tensor, heads: Iterable[str], mc_samples: int, seed: int) -> dict[str, torch.Tensor]:
        """Softmax outputs of ``mc_samples`` dropout passes per head from cached features.

        Returns a dict head -> tensor ``(mc_samples, N, C)``. The first tuned
        layer sees the deterministic backbone output, so it runs once and only
        the layers after the first dropout are replicated. Each stochastic pass
        through the shared section feeds all heads; every head then draws its
        own masks from a generator derived from ``(seed, head)``.
        """
        n = h.shape[0]
        p = 0.0 if self.frozen_model else self.dropout_rate

        def rep(t):
            return t.repeat((mc_samples,) + (1,) * (t.dim() - 1))

        out = {}
        with torch.no_grad():
            z, replicated = h, False
            if len(self.shared):
                g = _generator(_head_seed(seed, "shared"))
                z = dropout(rep(self.shared[0](h)), p, g)
                for layer in self.shared[1:]:
                    z = dropout(layer(z), p, g)
                replicated = True
            for head in heads:
                g = _generator(_head_seed(seed, head))
                layers = self.heads[head]
                x, is_rep = z, replicated
                for k, layer in enumerate(layers):
                    x = layer(x)
                    if not is_rep:
                        x, is_rep = rep(x), True
                    if k < len(layers) - 1:
                        x = dropout(x, p, g)
                out[head] = F.softmax(x, dim=-1).reshape(mc_samples, n, -1)
        return out


def _base_layers(base_model) -> list[nn.Module]:
    layers = getattr(base_model, "layers", None)
    if layers is None:
        raise ValidationError("base model must expose a .layers list")
    return list(layers)


def build_multihead(base_model: LayeredNet, config: PartitionConfig, seed: int = 0, heads: Sequence[str] = HEADS) -> MultiHeadModel:
    """Partition ``base_model`` and graft copies of its tail as prediction heads.

    ``seed`` is recorded for provenance; construction itself copies weights and
    draws nothing random, so repeated builds are bit-identical.
    """
    layers = _base_layers(base_model)
    if len(layers) < 3:
        raise ConfigurationError("base model needs at least 3 layers")
    unknown = set(heads) - set(HEADS)
    if unknown or not heads:
        raise ValidationError(f"heads must be a nonempty subset of {HEADS}")
    split = compute_split(len(layers), config)
    model = MultiHeadModel(base_model.arch, split, heads, config.dropout_rate)
    model.build_seed = seed
    model.partition = config
    nb, ns = split.n_backbone, split.n_shared
    model.backbone.extend(copy.deepcopy(layers[:nb]))
    model.shared.extend(copy.deepcopy(layers[nb : nb + ns]))
    for h in heads:
        model.heads[h].extend(copy.deepcopy(layers[nb + ns :]))
    dtype = next(base_model.parameters()).dtype
    model.to(dtype)
    model.freeze_backbone()
    return model


def forward_head(model: MultiHeadModel, x: torch.Tensor, head: str, dropout_seed: int | None = None) -> torch.Tensor:
    """Logits of one head; dropout off when ``dropout_seed`` is None, else seeded masks."""
    if head not in model.head_names:
        raise ValidationError(f"model has no {head!r} head (has {model.head_names})")
    first = model.arch[0]
    expected = first.get("cin", first.get("din"))
    if first["type"] == "conv":
        if x.dim() != 4 or x.shape[1] != expected:
            raise ValidationError(f"expected input (N, {expected}, H, W), got {tuple(x.shape)}")
    elif x.dim() < 2 or int(np.prod(x.shape[1:])) != expected:
        raise ValidationError(f"expected input with {expected} features, got {tuple(x.shape)}")
    g = None if dropout_seed is None else _generator(_head_seed(dropout_seed, head))
    with torch.no_grad():
        return model(x, head, g)


# ---------------------------------------------------------------------------
# Frozen teachers


def fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TeacherHandle:
    """Read-only teacher. Any detected parameter change raises :class:`ImmutabilityError`."""

    def __init__(self, kind: str, model: nn.Module):
        if kind not in ("clean_copy", "robust_small"):
            raise ValidationError(f"unknown teacher kind {kind!r}")
        model = copy.deepcopy(model)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "_model", model)
        object.__setattr__(self, "_print", fingerprint(model))

    def __setattr__(self, name, value):
        raise ImmutabilityError("teacher handles are read-only")

    @property
    def model(self) -> nn.Module:
        return self._model

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def verify(self):
        if fingerprint(self._model) != self._print:
            raise ImmutabilityError(f"{self.kind} teacher parameters were modified")

    def load_state_dict(self, *args, **kwargs):
        raise ImmutabilityError("teacher handles are read-only")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.verify()
        with torch.no_grad():
            return self._model(x)

    __call__ = logits


def clone_frozen_teacher(base_model: nn.Module) -> TeacherHandle:
    """Deep, read-only copy of the pre-distillation model."""
    return TeacherHandle("clean_copy", base_model)


# ---------------------------------------------------------------------------
# Checkpoints


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def architecture_hash(model) -> str:
    desc = {"arch": model.arch}
    if isinstance(model, MultiHeadModel):
        desc.update(split=dataclasses.asdict(model.split), heads=list(model.head_names), dropout=model.dropout_rate)
    return canonical_hash(desc)


def _section_blob(module: nn.Module) -> tuple[bytes, list[dict]]:
    buf, index, offset = io.BytesIO(), [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset, "nbytes": len(raw)})
        buf.write(raw)
        offset += len(raw)
    return buf.getvalue(), index


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: nn.Module, path, config_hash: str = "", extra: dict | None = None) -> str:
    """Write a deterministic archive: ``metadata.json`` plus one raw blob per section.

    Returns the sha256 of the archive bytes.
    """
    if isinstance(model, MultiHeadModel):
        sections = model.section_modules()
        meta = {
            "kind": "multihead",
            "split": dataclasses.asdict(model.split),
            "heads": list(model.head_names),
            "dropout_rate": model.dropout_rate,
            "build_seed": getattr(model, "build_seed", 0),
            "partition": dataclasses.asdict(getattr(model, "partition", PartitionConfig())),
        }
    else:
        sections = {"layers": model}
        meta = {"kind": "layered"}
    meta.update(arch=model.arch, config_hash=config_hash, arch_hash=architecture_hash(model), extra=extra or {})
    meta["dtype"] = str(next(model.parameters()).dtype).replace("torch.", "")
    blobs = {}
    meta["sections"] = {}
    for name, mod in sections.items():
        blobs[name], meta["sections"][name] = _section_blob(mod)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "metadata.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(blobs):
            _zip_write(zf, f"{name}.bin", blobs[name])
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_metadata(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("metadata.json"))


def _load_section(module: nn.Module, blob: bytes, index: list[dict]):
    state = {}
    for rec in index:
        arr = np.frombuffer(blob, dtype=rec["dtype"], count=int(np.prod(rec["shape"])) if rec["shape"] else 1, offset=rec["offset"])
        state[rec["name"]] = torch.from_numpy(arr.reshape(rec["shape"]).copy())
    module.load_state_dict(state)


def load_checkpoint(path, expected_config_hash: str | None = None):
    """Rebuild a model from :func:`save_checkpoint` output, verifying hashes."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("metadata.json"))
        blobs = {name: zf.read(f"{name}.bin") for name in meta["sections"]}
    if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
        raise ValidationError(
            f"checkpoint config hash {meta['config_hash']} does not match expected {expected_config_hash}"
        )
    dtype = getattr(torch, meta.get("dtype", "float32"))
    if meta["kind"] == "layered":
        model = LayeredNet(meta["arch"], dtype=dtype)
        _load_section(model, blobs["layers"], meta["sections"]["layers"])
    else:
        split = Split(**meta["split"])
        template = LayeredNet(meta["arch"], dtype=dtype)
        layers = list(template.layers)
        model = MultiHeadModel(meta["arch"], split, meta["heads"], meta["dropout_rate"])
        nb, ns = split.n_backbone, split.n_shared
        model.backbone.extend(layers[:nb])
        model.shared.extend(layers[nb : nb + ns])
        for h in meta["heads"]:
            model.heads[h].extend(copy.deepcopy(layers[nb + ns :]))
        model.to(dtype)
        for name, mod in model.section_modules().items():
            _load_section(mod, blobs[name], meta["sections"][name])
        model.build_seed = meta["build_seed"]
        model.partition = PartitionConfig(**meta["partition"])
        model.freeze_backbone()
    if architecture_hash(model) != meta["arch_hash"]:
        raise ValidationError("architecture hash mismatch in checkpoint")
    return model, meta


def section_bytes(model: MultiHeadModel, section: str) -> bytes:
    return _section_blob(model.section_modules()[section])[0]
