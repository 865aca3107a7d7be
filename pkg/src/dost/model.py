"""Adaptive spatio-temporal forecasting network.

Input embedding -> per-location bottleneck adapter -> gated-TCN/graph-diffusion
stack -> linear decoder. Parameters are split into a traditional group (frozen
online) and an adapter group (fine-tuned online).
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    lookback: int = 12
    horizon: int = 12
    n_features: int = 1
    d_hidden: int = 32
    d_out: int = 256
    d_adapter: int = 4
    st_blocks: int = 2
    diffusion_steps: int = 2
    kernel_size: int = 2
    use_adapter: bool = True
    shared_adapter: bool = False

    def __post_init__(self):
        for f in ("n_nodes", "lookback", "horizon", "n_features", "d_hidden", "d_out",
                  "d_adapter", "st_blocks", "kernel_size"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.diffusion_steps < 0:
            raise ConfigError("diffusion_steps must be >= 0")
        if self.d_adapter >= self.d_hidden:
            raise ConfigError(f"adapter bottleneck d_adapter={self.d_adapter} must be < d_hidden={self.d_hidden}")
        if self.receptive_field > self.lookback:
            raise ConfigError(
                f"ST stack receptive field {self.receptive_field} exceeds lookback {self.lookback}"
            )

    @property
    def dilations(self) -> list[int]:
        return [2**b for b in range(self.st_blocks)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


def normalize_adjacency(adj) -> np.ndarray:
    """Random-walk normalization ``D^-1 (A + I)``; every row sums to one."""
    A = np.asarray(adj, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if (A < 0).any() or not np.isfinite(A).all():
        raise ValueError("adjacency entries must be finite and non-negative")
    A = A + np.eye(A.shape[0])
    return A / A.sum(axis=1, keepdims=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AdaptiveSTNetwork:
    def __init__(self, config: ModelConfig, adj, seed: int = 0):
        self.config = config
        adj = np.asarray(adj, dtype=np.float64)
        if adj.shape != (config.n_nodes, config.n_nodes):
            raise ConfigError(f"adjacency {adj.shape} does not match n_nodes={config.n_nodes}")
        self.adj_raw = adj
        self.adj_norm = normalize_adjacency(adj)
        self._powers = self._diffusion_powers()

        c = config
        rng = np.random.default_rng(seed)
        self.traditional: dict[str, Parameter] = {}
        self.adapter: dict[str, Parameter] = {}

        def trad(name, fan_in, shape, zero=False):
            data = np.zeros(shape) if zero else _uniform(rng, fan_in, shape)
            self.traditional[name] = Parameter(data, name=name)

        trad("embed.w", c.n_features, (c.n_features, c.d_hidden))
        trad("embed.b", c.n_features, (c.d_hidden,))
        for b in range(c.st_blocks):
            fan = c.kernel_size * c.d_hidden
            trad(f"block{b}.filter.w", fan, (c.kernel_size, c.d_hidden, c.d_hidden))
            trad(f"block{b}.filter.b", fan, (c.d_hidden,))
            trad(f"block{b}.gate.w", fan, (c.kernel_size, c.d_hidden, c.d_hidden))
            trad(f"block{b}.gate.b", fan, (c.d_hidden,))
            for k in range(c.diffusion_steps + 1):
                trad(f"block{b}.diff{k}.w", (c.diffusion_steps + 1) * c.d_hidden, (c.d_hidden, c.d_hidden))
            trad(f"block{b}.diff.b", (c.diffusion_steps + 1) * c.d_hidden, (c.d_hidden,))
        trad("out.w", c.d_hidden, (c.d_hidden, c.d_out))
        trad("out.b", c.d_hidden, (c.d_out,))
        trad("decoder.w", c.d_out, (c.d_out, c.horizon * c.n_features))
        trad("decoder.b", c.d_out, (c.horizon * c.n_features,))

        # adapter starts as identity: down-projection random, up-projection zero
        banks = 1 if c.shared_adapter else c.n_nodes
        shape1 = (c.d_hidden, c.d_adapter) if c.shared_adapter else (banks, c.d_hidden, c.d_adapter)
        shape2 = (c.d_adapter, c.d_hidden) if c.shared_adapter else (banks, c.d_adapter, c.d_hidden)
        self.adapter["adapter.w1"] = Parameter(_uniform(rng, c.d_hidden, shape1), name="adapter.w1")
        self.adapter["adapter.w2"] = Parameter(np.zeros(shape2), name="adapter.w2")

    def _diffusion_powers(self) -> list[np.ndarray]:
        powers = [np.eye(self.config.n_nodes)]
        for _ in range(self.config.diffusion_steps):
            powers.append(self.adj_norm @ powers[-1])
        return powers

    # -- parameter groups -------------------------------------------------

    def params_traditional(self) -> list[Parameter]:
        return list(self.traditional.values())

    def params_adapter(self) -> list[Parameter]:
        return list(self.adapter.values())

    def parameters(self) -> list[Parameter]:
        return self.params_traditional() + self.params_adapter()

    def named_parameters(self) -> dict[str, Parameter]:
        return {**self.traditional, **self.adapter}

    def set_trainable(self, scope: str) -> list[Parameter]:
        """Mark one group trainable and freeze the rest.

        ``scope`` is one of ``adapter``, ``traditional``, ``full`` or ``none``.
        Returns the trainable list.
        """
        groups = {
            "adapter": (False, True),
            "traditional": (True, False),
            "full": (True, True),
            "none": (False, False),
        }
        if scope not in groups:
            raise ValueError(f"unknown trainable scope {scope!r}")
        t_flag, a_flag = groups[scope]
        for p in self.params_traditional():
            p.trainable = t_flag
        for p in self.params_adapter():
            p.trainable = a_flag
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def clone(self) -> "AdaptiveSTNetwork":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError(f"state keys differ from network parameters: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            if v.shape != params[k].shape:
                raise ConfigError(f"{k}: shape {v.shape} != expected {params[k].shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def checksum(self, group: str = "all") -> str:
        params = {
            "traditional": self.traditional,
            "adapter": self.adapter,
            "all": self.named_parameters(),
        }[group]
        h = hashlib.sha256()
        for k in sorted(params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(params[k].data).tobytes())
        return h.hexdigest()

    # -- forward pieces ---------------------------------------------------

    def embed(self, x: Tensor) -> Tensor:
        """``[..., N, L, d] -> [..., N, L, d_h]``."""
        c = self.config
        if x.shape[-3:] != (c.n_nodes, c.lookback, c.n_features):
            raise nx.ShapeError(
                f"embed: expected trailing shape {(c.n_nodes, c.lookback, c.n_features)}, got {x.shape}"
            )
        t = self.traditional
        return nx.add_bias(nx.matmul(x, t["embed.w"]), t["embed.b"])

    def via_forward(self, h: Tensor) -> Tensor:
        c = self.config
        w1, w2 = self.adapter["adapter.w1"], self.adapter["adapter.w2"]
        if c.shared_adapter:
            z = nx.matmul(nx.relu(nx.matmul(h, w1)), w2)
        else:
            if h.ndim < 3 or h.shape[-3] != w1.shape[0]:
                raise nx.ShapeError(f"via_forward: {h.shape} has wrong node count for {w1.shape[0]} adapters")
            z = nx.node_matmul(nx.relu(nx.node_matmul(h, w1)), w2)
        return nx.add(z, h)

    def st_forward(self, x: Tensor) -> Tensor:
        """``[..., N, L, d_h] -> [..., N, d_o]``."""
        c = self.config
        t = self.traditional
        for b, dil in enumerate(c.dilations):
            f = nx.tanh(nx.add_bias(nx.causal_dilated_conv1d(x, t[f"block{b}.filter.w"], dil), t[f"block{b}.filter.b"]))
            g = nx.sigmoid(nx.add_bias(nx.causal_dilated_conv1d(x, t[f"block{b}.gate.w"], dil), t[f"block{b}.gate.b"]))
            u = nx.mul(f, g)
            z = None
            for k, power in enumerate(self._powers):
                mixed = u if k == 0 else nx.graph_mix(power, u)
                term = nx.matmul(mixed, t[f"block{b}.diff{k}.w"])
                z = term if z is None else nx.add(z, term)
            z = nx.add_bias(z, t[f"block{b}.diff.b"])
            x = nx.add(z, nx.time_slice(x, x.shape[-2] - z.shape[-2]))
        last = nx.time_slice(x, x.shape[-2] - 1)
        last = nx.reshape(last, last.shape[:-2] + (last.shape[-1],))
        return nx.relu(nx.add_bias(nx.matmul(last, t["out.w"]), t["out.b"]))

    def decode(self, h_tilde: Tensor) -> Tensor:
        """``[..., N, d_o] -> [..., N, H, d]``."""
        c = self.config
        if h_tilde.shape[-1] != c.d_out:
            raise nx.ShapeError(f"decode: expected last axis {c.d_out}, got {h_tilde.shape}")
        t = self.traditional
        y = nx.add_bias(nx.matmul(h_tilde, t["decoder.w"]), t["decoder.b"])
        return nx.reshape(y, y.shape[:-1] + (c.horizon, c.n_features))

    def forward(self, x, use_adapter: bool | None = None) -> Tensor:
        """Forecast ``[..., N, H, d]`` from a look-back window ``[..., N, L, d]``."""
        if use_adapter is None:
            use_adapter = self.config.use_adapter
        x = nx.as_tensor(x)
        h = self.embed(x)
        if use_adapter:
            h = self.via_forward(h)
        return self.decode(self.st_forward(h))

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Untaped forward returning a plain array."""
        return self.forward(x).data


# ----------------------------------------------------------------------------
# checkpoints

_MAGIC = "dost-checkpoint v1"


def _write_packed(path: Path, header: list[str], arrays: list[tuple[str, np.ndarray]]) -> None:
    lines = list(header)
    offset = 0
    for name, arr in arrays:
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        offset += arr.size * 8
    lines.append(f"bytes {offset}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_packed(path: Path, magic: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: manifest terminator not found")
    manifest = raw[:cut].decode("utf-8").splitlines()
    blob = raw[cut + len(marker):]
    if not manifest or manifest[0] != magic:
        raise ValueError(f"{path}: not a {magic!r} file")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in manifest[1:]:
        parts = line.split()
        if parts[0] == "tensor":
            name, shape_s, off = parts[1], parts[2], int(parts[3])
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            n = int(np.prod(shape)) if shape else 1
            chunk = blob[off: off + 8 * n]
            if len(chunk) != 8 * n:
                raise ValueError(f"{path}: truncated data for {name}")
            tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        elif parts[0] == "bytes":
            if len(blob) != int(parts[1]):
                raise ValueError(f"{path}: expected {parts[1]} data bytes, found {len(blob)}")
        else:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta, tensors


def save_checkpoint(net: AdaptiveSTNetwork, path) -> None:
    header = [_MAGIC] + [f"config.{k}={v}" for k, v in asdict(net.config).items()]
    arrays = [(k, p.data) for k, p in net.named_parameters().items()]
    arrays.append(("adjacency", net.adj_raw))
    _write_packed(Path(path), header, arrays)


def _parse_config(meta: dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        raw = meta.get(f"config.{f.name}")
        if raw is None:
            continue
        kw[f.name] = raw == "True" if f.type in ("bool", bool) else int(raw)
    return ModelConfig(**kw)


def load_checkpoint(path, config: ModelConfig | None = None) -> AdaptiveSTNetwork:
    """Rebuild a network from a checkpoint; shapes are validated against ``config``."""
    meta, tensors = _read_packed(Path(path), _MAGIC)
    stored = _parse_config(meta)
    if config is not None and config != stored:
        raise ConfigError(f"checkpoint config {stored} differs from requested {config}")
    net = AdaptiveSTNetwork(stored, tensors.pop("adjacency"))
    net.load_state_dict(tensors)
    return net
