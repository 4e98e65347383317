"""Branch/trunk operator models and their binary checkpoint format.

The branch network encodes a pooled low-resolution field, the trunk encodes a
query coordinate, and the prediction is their dot product plus a scalar
output bias.  The 1D model uses plain MLPs on both sides; the 2D branch
replicates its input image across many channels, extracts features with two
small convolutions (k=1 then k=2, valid padding), and finishes with a
batch-normalized MLP.

Checkpoints ("OSRM") store a canonical key=value architecture descriptor
followed by every parameter and buffer array as little-endian float64, then
an optional Adam state; round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .fields import Field1D, Field2D, Grid1D, Grid2D
from .nn import (
    ActivationLayer,
    AdamState,
    BatchNormLayer,
    Flatten,
    ReplicateChannels,
    ShapeError,
    Stack,
    init_conv,
    init_dense,
    mse_loss,
)
from .pooling import PooledSample
from .rng import make_rng
from .simulate import KDVB_DOMAIN

CHECKPOINT_MAGIC = b"OSRM"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Malformed, truncated, or inconsistent checkpoint data."""


@dataclass(frozen=True)
class DeepONet1DConfig:
    input_width: int
    branch_hidden: tuple[int, ...] = (256, 256, 256)
    trunk_hidden: tuple[int, ...] = (128, 128, 128)
    p: int = 128
    activation: str = "softplus"
    trunk_activation: str | None = None
    use_output_bias: bool = True
    use_batchnorm: bool = False

    def __post_init__(self):
        if self.input_width < 1 or self.p < 1:
            raise ValueError("widths must be positive")
        if not self.branch_hidden or not self.trunk_hidden:
            raise ValueError("need at least one hidden layer per net")

    @property
    def trunk_act(self) -> str:
        return self.trunk_activation or self.activation


@dataclass(frozen=True)
class DeepONet2DConfig:
    input_shape: tuple[int, int]
    replicate_channels: int = 200
    conv1_channels: int = 100
    conv2_channels: int = 40
    mlp_hidden: tuple[int, ...] = (512, 256, 256)
    trunk_hidden: tuple[int, ...] = (128, 128, 128)
    p: int = 128
    activation: str = "softplus"
    trunk_activation: str | None = None
    use_output_bias: bool = True

    def __post_init__(self):
        h, w = self.input_shape
        if h < 2 or w < 2:
            raise ValueError(f"pooled input {h}x{w} too small for the k=2 convolution")
        if min(self.replicate_channels, self.conv1_channels, self.conv2_channels, self.p) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def trunk_act(self) -> str:
        return self.trunk_activation or self.activation

    @property
    def flatten_width(self) -> int:
        h, w = self.input_shape
        return (h - 1) * (w - 1) * self.conv2_channels


@dataclass
class DeepONetModel:
    case: str
    branch: Stack
    trunk: Stack
    config: DeepONet1DConfig | DeepONet2DConfig
    coord_bounds: tuple[tuple[float, float], ...]
    output_bias: np.ndarray | None
    in_mean: float = 0.0
    in_std: float = 1.0
    pool_mode: str = "avg"
    pool_m: int = 1
    _cache: tuple | None = field(default=None, repr=False)

    @property
    def query_dim(self) -> int:
        return len(self.coord_bounds)

    @property
    def p(self) -> int:
        return self.config.p

    def parameters(self) -> list[np.ndarray]:
        out = self.branch.params() + self.trunk.params()
        if self.output_bias is not None:
            out.append(self.output_bias)
        return out

    def gradients(self) -> list[np.ndarray]:
        out = self.branch.grads() + self.trunk.grads()
        if self.output_bias is not None:
            out.append(self._grad_bias)
        return out

    def buffers(self) -> list[np.ndarray]:
        return self.branch.buffers() + self.trunk.buffers()

    def parameter_names(self) -> list[str]:
        names = [f"branch.{n}" for n in self.branch.param_names()]
        names += [f"trunk.{n}" for n in self.trunk.param_names()]
        if self.output_bias is not None:
            names.append("output_bias")
        return names

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grads(self):
        for g in self.gradients():
            g[...] = 0.0

    def __post_init__(self):
        self._grad_bias = np.zeros(1)

    # -- forward / backward ------------------------------------------------

    def branch_inputs(self, raw: np.ndarray) -> np.ndarray:
        """Standardize raw pooled values and shape them for the branch net."""
        std = self.in_std if self.in_std > 1e-12 else 1.0
        x = (np.asarray(raw, dtype=np.float64) - self.in_mean) / std
        if isinstance(self.config, DeepONet1DConfig):
            return x.reshape(x.shape[0], -1)
        h, w = self.config.input_shape
        return x.reshape(x.shape[0], 1, h, w)

    def trunk_inputs(self, coords: np.ndarray) -> np.ndarray:
        """Affinely map each coordinate axis onto [-1, 1]."""
        coords = np.asarray(coords, dtype=np.float64)
        out = np.empty_like(coords)
        for axis, (lo, hi) in enumerate(self.coord_bounds):
            out[..., axis] = 2.0 * (coords[..., axis] - lo) / (hi - lo) - 1.0
        return out

    def forward_batch(self, u_batch: np.ndarray, y_batch: np.ndarray, train: bool = False) -> np.ndarray:
        """Predictions [B, P] for B pooled inputs and P query points each."""
        if y_batch.ndim != 3 or y_batch.shape[2] != self.query_dim:
            raise ShapeError(f"queries must be [B, P, {self.query_dim}]")
        n_snap, n_pts, _ = y_batch.shape
        branch_out = self.branch.forward(self.branch_inputs(u_batch), train=train)
        trunk_out = self.trunk.forward(
            self.trunk_inputs(y_batch.reshape(n_snap * n_pts, -1)), train=train
        ).reshape(n_snap, n_pts, self.p)
        out = np.einsum("bp,bqp->bq", branch_out, trunk_out, optimize=True)
        if self.output_bias is not None:
            out += self.output_bias[0]
        self._cache = (branch_out, trunk_out)
        return out

    def backward_batch(self, d_out: np.ndarray) -> None:
        """Accumulate parameter gradients from d(loss)/d(predictions)."""
        if self._cache is None:
            raise ShapeError("backward before forward")
        branch_out, trunk_out = self._cache
        n_snap, n_pts, _ = trunk_out.shape
        d_branch = np.einsum("bq,bqp->bp", d_out, trunk_out, optimize=True)
        d_trunk = np.einsum("bq,bp->bqp", d_out, branch_out, optimize=True)
        self.branch.backward(d_branch)
        self.trunk.backward(d_trunk.reshape(n_snap * n_pts, self.p))
        if self.output_bias is not None:
            self._grad_bias[0] += d_out.sum()


class DeepONetLossModel:
    """grad_check adapter: inputs are a (u_batch, y_batch) pair."""

    def __init__(self, model: DeepONetModel, train_mode: bool = False):
        self.model = model
        self.train_mode = train_mode

    def parameters(self):
        return self.model.parameters()

    def parameter_names(self):
        return self.model.parameter_names()

    def loss_value(self, inputs, targets) -> float:
        u_batch, y_batch = inputs
        pred = self.model.forward_batch(u_batch, y_batch, train=self.train_mode)
        loss, _ = mse_loss(pred, targets)
        return loss

    def loss_and_grads(self, inputs, targets):
        u_batch, y_batch = inputs
        self.model.zero_grads()
        pred = self.model.forward_batch(u_batch, y_batch, train=self.train_mode)
        loss, d_pred = mse_loss(pred, targets)
        self.model.backward_batch(d_pred)
        return loss, [g.copy() for g in self.model.gradients()]


# ---------------------------------------------------------------------------
# builders

def _mlp(rng, widths: tuple[int, ...], activation: str, batchnorm: bool) -> Stack:
    layers = []
    for n_in, n_out in zip(widths[:-2], widths[1:-1]):
        if batchnorm:
            layers.append(init_dense(rng, n_in, n_out, "identity"))
            layers.append(BatchNormLayer(n_out))
            layers.append(ActivationLayer(activation))
        else:
            layers.append(init_dense(rng, n_in, n_out, activation))
    layers.append(init_dense(rng, widths[-2], widths[-1], "identity"))
    return Stack(layers)


def build_deeponet_1d(config: DeepONet1DConfig, seed: int = 0) -> DeepONetModel:
    """Plain-MLP branch and trunk over a pooled 1D field and a scalar query."""
    rng = make_rng(seed, 0x1D)
    branch = _mlp(
        rng,
        (config.input_width, *config.branch_hidden, config.p),
        config.activation,
        config.use_batchnorm,
    )
    trunk = _mlp(rng, (1, *config.trunk_hidden, config.p), config.trunk_act, False)
    bias = np.zeros(1) if config.use_output_bias else None
    return DeepONetModel(
        case="kdvb",
        branch=branch,
        trunk=trunk,
        config=config,
        coord_bounds=(KDVB_DOMAIN,),
        output_bias=bias,
    )


def build_deeponet_2d(config: DeepONet2DConfig, seed: int = 0) -> DeepONetModel:
    """Conv-front branch per the 2D architecture plus an MLP trunk.

    Branch: replicate the single input channel, 1x1 conv down to
    ``conv1_channels``, batchnorm + relu, 2x2 valid conv to
    ``conv2_channels``, batchnorm + relu, flatten, then a batch-normalized
    softplus MLP ending at width p.
    """
    rng = make_rng(seed, 0x2D)
    branch_layers = [
        ReplicateChannels(config.replicate_channels),
        init_conv(rng, config.replicate_channels, config.conv1_channels, 1, relu_after=True),
        BatchNormLayer(config.conv1_channels),
        ActivationLayer("relu"),
        init_conv(rng, config.conv1_channels, config.conv2_channels, 2, relu_after=True),
        BatchNormLayer(config.conv2_channels),
        ActivationLayer("relu"),
        Flatten(),
    ]
    widths = (config.flatten_width, *config.mlp_hidden, config.p)
    branch_layers.extend(_mlp(rng, widths, config.activation, True).layers)
    trunk = _mlp(rng, (2, *config.trunk_hidden, config.p), config.trunk_act, False)
    bias = np.zeros(1) if config.use_output_bias else None
    return DeepONetModel(
        case="poisson",
        branch=Stack(branch_layers),
        trunk=trunk,
        config=config,
        coord_bounds=((0.0, np.pi), (0.0, np.pi)),
        output_bias=bias,
    )


# ---------------------------------------------------------------------------
# prediction

def forward(model: DeepONetModel, u_lr: PooledSample, y) -> float:
    """Evaluate the learned operator at one query coordinate (eval mode)."""
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y_arr.shape != (model.query_dim,):
        raise ShapeError(f"query must have {model.query_dim} coordinate(s)")
    if not np.all(np.isfinite(u_lr.values)) or not np.all(np.isfinite(y_arr)):
        raise ValueError("non-finite inputs")
    out = model.forward_batch(u_lr.values[None, ...], y_arr[None, None, :], train=False)
    return float(out[0, 0])


def grid_query_coords(grid: Grid1D | Grid2D) -> np.ndarray:
    """Query coordinates for every grid point, in field storage order."""
    if isinstance(grid, Grid1D):
        return grid.coords()[:, None]
    xm, ym = np.meshgrid(grid.x_coords(), grid.y_coords())
    return np.column_stack([xm.ravel(), ym.ravel()])


def predict_field(model: DeepONetModel, u_lr: PooledSample, hr_grid: Grid1D | Grid2D):
    """Reconstruct the full HR field: one branch pass, trunk per grid point."""
    coords = grid_query_coords(hr_grid)
    branch_out = model.branch.forward(model.branch_inputs(u_lr.values[None, ...]), train=False)
    trunk_out = model.trunk.forward(model.trunk_inputs(coords), train=False)
    values = trunk_out @ branch_out[0]
    if model.output_bias is not None:
        values += model.output_bias[0]
    if isinstance(hr_grid, Grid1D):
        return Field1D(hr_grid, values)
    return Field2D(hr_grid, values.reshape(hr_grid.ny, hr_grid.nx))


# ---------------------------------------------------------------------------
# checkpoints

def _fmt_ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok)


def _descriptor(model: DeepONetModel) -> str:
    cfg = model.config
    lines = [
        f"case={model.case}",
        f"arch={'1d' if isinstance(cfg, DeepONet1DConfig) else '2d'}",
        f"pool_mode={model.pool_mode}",
        f"pool_m={model.pool_m}",
    ]
    if isinstance(cfg, DeepONet1DConfig):
        lines += [
            f"input_width={cfg.input_width}",
            f"branch_hidden={_fmt_ints(cfg.branch_hidden)}",
            f"use_batchnorm={int(cfg.use_batchnorm)}",
        ]
    else:
        lines += [
            f"input_shape={_fmt_ints(cfg.input_shape)}",
            f"replicate_channels={cfg.replicate_channels}",
            f"conv_channels={_fmt_ints((cfg.conv1_channels, cfg.conv2_channels))}",
            f"mlp_hidden={_fmt_ints(cfg.mlp_hidden)}",
        ]
    lines += [
        f"trunk_hidden={_fmt_ints(cfg.trunk_hidden)}",
        f"p={cfg.p}",
        f"activation={cfg.activation}",
        f"trunk_activation={cfg.trunk_act}",
        f"use_output_bias={int(cfg.use_output_bias)}",
        f"in_mean={model.in_mean!r}",
        f"in_std={model.in_std!r}",
        "coord_bounds=" + ";".join(f"{lo!r}:{hi!r}" for lo, hi in model.coord_bounds),
        f"param_count={model.parameter_count()}",
    ]
    return "\n".join(lines) + "\n"


def _model_from_descriptor(desc: dict[str, str]) -> DeepONetModel:
    try:
        arch = desc["arch"]
        if arch == "1d":
            cfg = DeepONet1DConfig(
                input_width=int(desc["input_width"]),
                branch_hidden=_parse_ints(desc["branch_hidden"]),
                trunk_hidden=_parse_ints(desc["trunk_hidden"]),
                p=int(desc["p"]),
                activation=desc["activation"],
                trunk_activation=desc.get("trunk_activation"),
                use_output_bias=bool(int(desc["use_output_bias"])),
                use_batchnorm=bool(int(desc["use_batchnorm"])),
            )
            model = build_deeponet_1d(cfg)
        elif arch == "2d":
            conv_channels = _parse_ints(desc["conv_channels"])
            cfg = DeepONet2DConfig(
                input_shape=_parse_ints(desc["input_shape"]),
                replicate_channels=int(desc["replicate_channels"]),
                conv1_channels=conv_channels[0],
                conv2_channels=conv_channels[1],
                mlp_hidden=_parse_ints(desc["mlp_hidden"]),
                trunk_hidden=_parse_ints(desc["trunk_hidden"]),
                p=int(desc["p"]),
                activation=desc["activation"],
                trunk_activation=desc.get("trunk_activation"),
                use_output_bias=bool(int(desc["use_output_bias"])),
            )
            model = build_deeponet_2d(cfg)
        else:
            raise CheckpointError(f"unknown architecture tag {arch!r}")
        model.case = desc["case"]
        model.pool_mode = desc["pool_mode"]
        model.pool_m = int(desc["pool_m"])
        model.in_mean = float(desc["in_mean"])
        model.in_std = float(desc["in_std"])
        bounds = tuple(
            tuple(float(v) for v in pair.split(":")) for pair in desc["coord_bounds"].split(";")
        )
        model.coord_bounds = bounds
    except (KeyError, ValueError, IndexError) as exc:
        raise CheckpointError(f"bad checkpoint descriptor: {exc}") from None
    return model


def _write_array(fh, arr: np.ndarray):
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_array(fh, expected_shape: tuple[int, ...], what: str) -> np.ndarray:
    head = fh.read(1)
    if len(head) != 1:
        raise CheckpointError(f"truncated checkpoint before {what}")
    ndim = struct.unpack("<B", head)[0]
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise CheckpointError(f"truncated shape for {what}")
    shape = struct.unpack(f"<{ndim}I", raw)
    if shape != tuple(expected_shape):
        raise CheckpointError(f"{what}: stored shape {shape} != expected {tuple(expected_shape)}")
    count = int(np.prod(shape)) if shape else 1
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise CheckpointError(f"{what}: blob holds fewer floats than the descriptor requires")
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def save_checkpoint(model: DeepONetModel, path, adam_state: AdamState | None = None) -> None:
    """Write the OSRM checkpoint; parameters, buffers, optional Adam state."""
    desc = _descriptor(model).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for arr in model.parameters() + model.buffers():
            _write_array(fh, arr)
        if adam_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", adam_state.t))
            fh.write(struct.pack("<4d", adam_state.lr, adam_state.beta1, adam_state.beta2, adam_state.eps))
            for arr in adam_state.m + adam_state.v:
                _write_array(fh, arr)


def read_checkpoint(path) -> tuple[DeepONetModel, AdamState | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not an OSRM checkpoint (bad magic)")
        version = struct.unpack("<B", fh.read(1))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (desc_len,) = struct.unpack("<I", fh.read(4))
        desc_raw = fh.read(desc_len)
        if len(desc_raw) != desc_len:
            raise CheckpointError(f"{path}: truncated descriptor")
        desc = {}
        for line in desc_raw.decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                desc[key] = value
        model = _model_from_descriptor(desc)
        if int(desc["param_count"]) != model.parameter_count():
            raise CheckpointError(
                f"{path}: descriptor parameter count {desc['param_count']} != "
                f"rebuilt {model.parameter_count()}"
            )
        names = model.parameter_names() + [f"buffer{i}" for i in range(len(model.buffers()))]
        for arr, name in zip(model.parameters() + model.buffers(), names):
            arr[...] = _read_array(fh, arr.shape, name)
        (has_adam,) = struct.unpack("<B", fh.read(1))
        adam_state = None
        if has_adam:
            (t,) = struct.unpack("<Q", fh.read(8))
            lr, beta1, beta2, eps = struct.unpack("<4d", fh.read(32))
            params = model.parameters()
            m = [_read_array(fh, p.shape, f"adam.m[{i}]") for i, p in enumerate(params)]
            v = [_read_array(fh, p.shape, f"adam.v[{i}]") for i, p in enumerate(params)]
            adam_state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=t, m=m, v=v)
    return model, adam_state


def load_checkpoint(path) -> DeepONetModel:
    """Rebuild a model from an OSRM checkpoint."""
    return read_checkpoint(path)[0]
