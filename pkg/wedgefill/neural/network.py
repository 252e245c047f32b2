"""
Small dilated convolutional network with hand-written reverse-mode gradients.

Arrays are channel-last, (batch, height, width, channels). Every layer is a
3x3 convolution with zero "same" padding; all layers but the last are
followed by ReLU. The normalized step t/T is appended to the input as a
constant extra channel. With stacking_depth > 1 the same weights are
applied again, the first state_channels inputs replaced by the previous
pass's output.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wedgefill.core.errors import InvalidInputError, TensorFormatError

logger = logging.getLogger(__name__)

TNorm = Union[float, np.ndarray]


class NetSpec(BaseModel):
    """Architecture of one network head"""

    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    hidden_channels: int = Field(default=32, ge=1)
    dilations: Tuple[int, ...] = (1, 2, 4, 8, 4, 1)
    stacking_depth: int = Field(default=1, ge=1)
    state_channels: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_stacking(self) -> "NetSpec":
        if len(self.dilations) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive, got {self.dilations}")
        if self.stacking_depth > 1:
            if self.state_channels < 1 or self.state_channels != self.out_channels:
                raise ValueError("stacked networks feed their output back: state_channels must equal out_channels")
            if self.state_channels > self.in_channels:
                raise ValueError("state_channels exceeds in_channels")
        return self

    def layer_channels(self) -> List[Tuple[int, int, int]]:
        """(fan-in channels, fan-out channels, dilation) per layer; the first layer sees the time channel"""
        widths = [self.in_channels + 1] + [self.hidden_channels] * (len(self.dilations) - 1) + [self.out_channels]
        return [(widths[k], widths[k + 1], d) for k, d in enumerate(self.dilations)]

    def parameter_count(self) -> int:
        """Closed form: sum over layers of 9 * c_in * c_out + c_out"""
        return sum(9 * c_in * c_out + c_out for c_in, c_out, _ in self.layer_channels())


@dataclass
class ModelParams:
    """Named trainable arrays plus the Adam moments that belong to them"""

    entries: "OrderedDict[str, np.ndarray]"
    step_count: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    @property
    def names(self) -> List[str]:
        return list(self.entries)

    @property
    def num_parameters(self) -> int:
        return int(sum(value.size for value in self.entries.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            entries=OrderedDict((k, v.copy()) for k, v in self.entries.items()),
            step_count=self.step_count,
            first_moments={k: v.copy() for k, v in self.first_moments.items()},
            second_moments={k: v.copy() for k, v in self.second_moments.items()},
        )

    def replace(self, name: str, value: np.ndarray) -> None:
        """Overwrite one entry in place; its shape is fixed at creation"""
        if value.shape != self.entries[name].shape:
            raise InvalidInputError(f"{name}: shape {value.shape} differs from {self.entries[name].shape}")
        self.entries[name] = value.astype(self.entries[name].dtype, copy=False)

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Flatten into TensorContainer entries (parameters, moments, step counter)"""
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in self.entries.items():
            tensors[f"param/{name}"] = value
        for name, value in self.first_moments.items():
            tensors[f"adam_m/{name}"] = value
        for name, value in self.second_moments.items():
            tensors[f"adam_v/{name}"] = value
        tensors["meta/step_count"] = np.array([self.step_count], dtype=np.float64)
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], dtype=np.float32) -> "ModelParams":
        entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        first: Dict[str, np.ndarray] = {}
        second: Dict[str, np.ndarray] = {}
        step_count = 0
        for key, value in tensors.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                entries[name] = np.array(value, dtype=dtype)
            elif kind == "adam_m":
                first[name] = np.array(value, dtype=dtype)
            elif kind == "adam_v":
                second[name] = np.array(value, dtype=dtype)
            elif key == "meta/step_count":
                step_count = int(round(float(np.asarray(value).ravel()[0])))
        if not entries:
            raise TensorFormatError("checkpoint holds no parameters")
        for name in list(first) + list(second):
            if name not in entries:
                raise TensorFormatError(f"optimizer moment for unknown parameter '{name}'")
        return cls(entries=entries, step_count=step_count, first_moments=first, second_moments=second)


def init_params(spec: NetSpec, rng: np.random.Generator, zero_output: bool = True,
                dtype=np.float32) -> ModelParams:
    """
    Kaiming-uniform (fan-in) weights for hidden layers, zero biases

    Args:
        spec: architecture
        rng: generator for the weight draws
        zero_output: zero the last layer so the initial prediction is exactly 0
        dtype: storage dtype of every entry

    Returns:
        ModelParams: fresh parameters with step_count 0
    """
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    layers = spec.layer_channels()
    for k, (c_in, c_out, _) in enumerate(layers):
        bound = np.sqrt(6.0 / (9 * c_in))
        if zero_output and k == len(layers) - 1:
            weight = np.zeros((3, 3, c_in, c_out))
        else:
            weight = rng.uniform(-bound, bound, size=(3, 3, c_in, c_out))
        entries[f"conv{k}.weight"] = weight.astype(dtype)
        entries[f"conv{k}.bias"] = np.zeros(c_out, dtype=dtype)
    params = ModelParams(entries=entries)
    logger.debug(f"Initialized network with {params.num_parameters} parameters")
    return params


def _conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, dilation: int) -> np.ndarray:
    batch, height, width, _ = x.shape
    padded = np.pad(x, ((0, 0), (dilation, dilation), (dilation, dilation), (0, 0)))
    out = np.broadcast_to(bias, (batch, height, width, bias.shape[0])).copy()
    for i in range(3):
        for j in range(3):
            window = padded[:, i * dilation:i * dilation + height, j * dilation:j * dilation + width, :]
            out += window @ weight[i, j]
    return out


def _conv_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                   dilation: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    batch, height, width, c_in = x.shape
    c_out = grad_out.shape[-1]
    padded = np.pad(x, ((0, 0), (dilation, dilation), (dilation, dilation), (0, 0)))
    grad_padded = np.zeros_like(padded)
    grad_weight = np.zeros_like(weight)
    flat_grad = grad_out.reshape(-1, c_out)
    for i in range(3):
        for j in range(3):
            rows = slice(i * dilation, i * dilation + height)
            cols = slice(j * dilation, j * dilation + width)
            grad_weight[i, j] = padded[:, rows, cols, :].reshape(-1, c_in).T @ flat_grad
            grad_padded[:, rows, cols, :] += grad_out @ weight[i, j].T
    grad_bias = flat_grad.sum(axis=0)
    grad_x = grad_padded[:, dilation:dilation + height, dilation:dilation + width, :]
    return grad_x, grad_weight, grad_bias


def _time_channel(t_norm: TNorm, shape: Tuple[int, ...], dtype) -> np.ndarray:
    batch, height, width, _ = shape
    t = np.asarray(t_norm, dtype=dtype)
    if t.ndim == 0:
        t = np.full(batch, t, dtype=dtype)
    if t.shape != (batch,):
        raise InvalidInputError(f"t_norm must be a scalar or one value per sample, got shape {t.shape}")
    return np.broadcast_to(t[:, None, None, None], (batch, height, width, 1))


def _check_input(spec: NetSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[-1] != spec.in_channels:
        raise InvalidInputError(f"network input has shape {x.shape}, expected (B, H, W, {spec.in_channels})")
    return x


def _single_pass(params: ModelParams, spec: NetSpec, x: np.ndarray, t_norm: TNorm,
                 cache: Optional[list]) -> np.ndarray:
    h = np.concatenate([x, _time_channel(t_norm, x.shape, x.dtype)], axis=-1)
    layers = spec.layer_channels()
    for k, (_, _, dilation) in enumerate(layers):
        pre = _conv(h, params[f"conv{k}.weight"], params[f"conv{k}.bias"], dilation)
        if cache is not None:
            cache.append(h)
        h = pre if k == len(layers) - 1 else np.maximum(pre, 0)
    return h


def _stacked_input(spec: NetSpec, x: np.ndarray, previous: np.ndarray) -> np.ndarray:
    return np.concatenate([previous, x[..., spec.state_channels:]], axis=-1)


def net_forward(params: ModelParams, spec: NetSpec, x: np.ndarray, t_norm: TNorm) -> np.ndarray:
    """Apply the network stacking_depth times with shared weights"""
    x = _check_input(spec, x)
    dtype = params["conv0.weight"].dtype
    current = x.astype(dtype, copy=False)
    out = _single_pass(params, spec, current, t_norm, None)
    for _ in range(spec.stacking_depth - 1):
        current = _stacked_input(spec, x.astype(dtype, copy=False), out)
        out = _single_pass(params, spec, current, t_norm, None)
    return out


def _forward_with_cache(params: ModelParams, spec: NetSpec, x: np.ndarray,
                        t_norm: TNorm) -> Tuple[np.ndarray, np.ndarray, List[list]]:
    x = _check_input(spec, x).astype(params["conv0.weight"].dtype, copy=False)
    caches: List[list] = []
    current = x
    out = None
    for depth in range(spec.stacking_depth):
        if depth > 0:
            current = _stacked_input(spec, x, out)
        cache: list = []
        out = _single_pass(params, spec, current, t_norm, cache)
        caches.append(cache)
    return x, out, caches


def _backward_from_cache(params: ModelParams, spec: NetSpec, x: np.ndarray, out: np.ndarray, caches: List[list],
                         upstream_grad: np.ndarray) -> Tuple["OrderedDict[str, np.ndarray]", np.ndarray]:
    upstream = np.asarray(upstream_grad, dtype=x.dtype)
    if upstream.shape != out.shape:
        raise InvalidInputError(f"upstream gradient has shape {upstream.shape}, output is {out.shape}")
    layers = spec.layer_channels()

    grads: "OrderedDict[str, np.ndarray]" = OrderedDict((name, np.zeros_like(value))
                                                        for name, value in params.entries.items())
    grad_x = np.zeros_like(x)
    grad_out = upstream
    for depth in reversed(range(spec.stacking_depth)):
        cache = caches[depth]
        grad = grad_out
        for k in reversed(range(len(layers))):
            layer_input = cache[k]
            grad_in, grad_w, grad_b = _conv_backward(layer_input, params[f"conv{k}.weight"], grad, layers[k][2])
            grads[f"conv{k}.weight"] += grad_w
            grads[f"conv{k}.bias"] += grad_b
            if k > 0:
                # layer_input is the ReLU output of layer k - 1
                grad = grad_in * (layer_input > 0)
            else:
                grad = grad_in[..., :spec.in_channels]
        if depth > 0:
            grad_x[..., spec.state_channels:] += grad[..., spec.state_channels:]
            grad_out = grad[..., :spec.state_channels]
        else:
            grad_x += grad
    return grads, grad_x


def net_backward(params: ModelParams, spec: NetSpec, x: np.ndarray, upstream_grad: np.ndarray,
                 t_norm: TNorm) -> Tuple["OrderedDict[str, np.ndarray]", np.ndarray]:
    """
    Exact reverse-mode gradients of <net_forward(x), upstream_grad>

    The forward pass is recomputed with activations cached.

    Returns:
        (parameter gradients keyed like params.entries, gradient w.r.t. x)
    """
    x, out, caches = _forward_with_cache(params, spec, x, t_norm)
    return _backward_from_cache(params, spec, x, out, caches, upstream_grad)


LossGradFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def net_value_and_grad(params: ModelParams, spec: NetSpec, x: np.ndarray, t_norm: TNorm,
                       loss_grad_fn: LossGradFn) -> Tuple[float, np.ndarray, "OrderedDict[str, np.ndarray]"]:
    """One forward pass, loss_grad_fn(output) -> (loss, dL/doutput), then backpropagation"""
    x, out, caches = _forward_with_cache(params, spec, x, t_norm)
    loss, grad_out = loss_grad_fn(out)
    grads, _ = _backward_from_cache(params, spec, x, out, caches, grad_out)
    return float(loss), out, grads
