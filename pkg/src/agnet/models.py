"""Convolutional scan-plane classifiers.

Two variants share one VGG-style feature extractor: five blocks of 3x3
convolutions (3,3,3,2,2 per block) with channel widths (n, 2n, 4n, 8n,
8n) and 2x2 max pooling after the first four blocks, each convolution
followed by batch norm and ReLU.

* The baseline maps the final block through a 1x1 adaptation convolution
  (with batch norm, no ReLU) to one channel per class and averages each
  channel into a logit, so the adaptation output doubles as a per-class
  evidence map.
* The attention-gated variant instead gates two intermediate stages (the
  last 4n-channel and the last 8n-channel convolution outputs) against
  the final block, classifies each attended vector plus the averaged
  final block with per-scale linear heads, and combines the three scale
  decisions by probability averaging or a learned fine-tune head.

Parameters live in a flat name -> Tensor registry so the optimizer,
checkpoints, and weight decay masks all address the same objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import GateParams, gate_param_count, grid_attention, init_gate_params
from .errors import CheckpointError, ShapeError
from .tensor import BatchNormState, Tensor

BLOCK_CONVS = (3, 3, 3, 2, 2)
BLOCK_WIDTH_MULT = (1, 2, 4, 8, 8)
AGGREGATIONS = ("mean", "ds", "ft")


@dataclass
class ModelSpec:
    variant: str = "sononet"          # "sononet" | "ag"
    num_classes: int = 6
    n_base: int = 8
    in_channels: int = 1
    aggregation: str = "mean"         # AG only: "mean" | "ds" | "ft"
    normalization: str = "minsum"     # AG only: attention normalization

    def __post_init__(self):
        if self.variant not in ("sononet", "ag"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class ForwardOutput:
    """Everything one forward pass produces.

    logits        [N,K] decision scores fed to softmax for prediction
    scale_logits  per-scale raw logits (length 3 for AG, 1 for baseline)
    attention     per-gate attention maps [N,1,H,W] (AG only)
    cam_features  [N,C,h,w] map and cam_weights [K,C] such that
                  weights[k] @ features gives the class-k evidence map
    """

    logits: Tensor
    scale_logits: List[Tensor]
    attention: List[Tensor] = field(default_factory=list)
    cam_features: Optional[Tensor] = None
    cam_weights: Optional[np.ndarray] = None


def _he_conv(rng, cout, cin, k, dtype):
    fan_in = cin * k * k
    w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True, dtype=dtype)


def _he_linear(rng, dout, din, dtype):
    w = rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)
    return Tensor(w, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class _ConvBN:
    """3x3 (or 1x1) convolution + batch norm parameter bundle."""

    def __init__(self, rng, cin, cout, k, dtype):
        self.w = _he_conv(rng, cout, cin, k, dtype)
        self.b = _zeros((cout,), dtype)
        self.gamma = _ones((cout,), dtype)
        self.beta = _zeros((cout,), dtype)
        self.state = BatchNormState(cout, dtype=dtype)
        self.k = k

    def __call__(self, x: Tensor, training: bool, relu: bool = True) -> Tensor:
        y = T.conv2d(x, self.w, self.b, padding=self.k // 2)
        y = T.batch_norm2d(y, self.gamma, self.beta, self.state, training)
        return T.relu(y) if relu else y


class Model:
    """A built network: spec, parameter registry, and forward pass."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.training = True
        dt = T.default_dtype()
        self._params: Dict[str, Tensor] = {}
        self._decay: Dict[str, bool] = {}
        self._bn: Dict[str, BatchNormState] = {}

        self.blocks: List[List[_ConvBN]] = []
        cin = spec.in_channels
        for bi, (n_convs, mult) in enumerate(zip(BLOCK_CONVS, BLOCK_WIDTH_MULT)):
            cout = spec.n_base * mult
            block = []
            for ci in range(n_convs):
                layer = _ConvBN(rng, cin, cout, 3, dt)
                self._register_convbn(f"features.b{bi + 1}.c{ci + 1}", layer)
                block.append(layer)
                cin = cout
            self.blocks.append(block)
        c_mid = spec.n_base * BLOCK_WIDTH_MULT[2]   # gated stage 1 width
        c_top = spec.n_base * BLOCK_WIDTH_MULT[4]   # gated stage 2 / gating width
        k = spec.num_classes

        if spec.variant == "sononet":
            self.adapt = _ConvBN(rng, c_top, k, 1, dt)
            self._register_convbn("adapt", self.adapt)
        else:
            self.gate1 = init_gate_params(rng, c_mid, c_top, dtype=dt)
            self.gate2 = init_gate_params(rng, c_top, c_top, dtype=dt)
            self._register_gate("gate1", self.gate1)
            self._register_gate("gate2", self.gate2)
            self.heads = []
            for hi, din in enumerate((c_mid, c_top, c_top)):
                w = _he_linear(rng, k, din, dt)
                b = _zeros((k,), dt)
                self._register(f"head{hi + 1}.w", w, decay=True)
                self._register(f"head{hi + 1}.b", b, decay=False)
                self.heads.append((w, b))
            if spec.aggregation == "ft":
                # start as exact probability averaging so switching the
                # aggregation head on does not move the decision function
                eye = np.eye(k)
                self.ft_w = Tensor(
                    np.concatenate([eye, eye, eye], axis=1) / 3.0, requires_grad=True, dtype=dt
                )
                self.ft_b = _zeros((k,), dt)
                self._register("ft.w", self.ft_w, decay=True)
                self._register("ft.b", self.ft_b, decay=False)

    # -- registry -----------------------------------------------------------
    def _register(self, name: str, t: Tensor, decay: bool) -> None:
        self._params[name] = t
        self._decay[name] = decay

    def _register_convbn(self, prefix: str, layer: _ConvBN) -> None:
        self._register(f"{prefix}.w", layer.w, decay=True)
        self._register(f"{prefix}.b", layer.b, decay=False)
        self._register(f"{prefix}.gamma", layer.gamma, decay=False)
        self._register(f"{prefix}.beta", layer.beta, decay=False)
        self._bn[prefix] = layer.state

    def _register_gate(self, prefix: str, gate: GateParams) -> None:
        self._register(f"{prefix}.w_f", gate.w_f, decay=True)
        self._register(f"{prefix}.w_g", gate.w_g, decay=True)
        self._register(f"{prefix}.b_g", gate.b_g, decay=False)
        self._register(f"{prefix}.psi", gate.psi, decay=True)
        self._register(f"{prefix}.b_psi", gate.b_psi, decay=False)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def decay_mask(self) -> Dict[str, bool]:
        return dict(self._decay)

    def param_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def train(self, flag: bool = True) -> "Model":
        self.training = flag
        return self

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    # -- forward --------------------------------------------------------------
    def _extract(self, x: Tensor):
        """Run the shared extractor; returns the two gated stages and the top."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected input [N,{self.spec.in_channels},H,W], got {x.shape}"
            )
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"input H,W must be divisible by 16, got {x.shape[2:]}" )
        taps = {}
        h = x
        for bi, block in enumerate(self.blocks):
            for layer in block:
                h = layer(h, self.training)
            if bi == 2:
                taps["mid"] = h
            elif bi == 3:
                taps["deep"] = h
            if bi < 4:
                h = T.max_pool2d(h, 2, 2)
        taps["top"] = h
        return taps

    def forward(self, x: Tensor) -> ForwardOutput:
        taps = self._extract(x)
        if self.spec.variant == "sononet":
            maps = self.adapt(taps["top"], self.training, relu=False)
            logits = T.global_avg_pool(maps)
            k = self.spec.num_classes
            return ForwardOutput(
                logits=logits,
                scale_logits=[logits],
                cam_features=maps,
                cam_weights=np.eye(k, dtype=maps.dtype),
            )

        att1, a1 = grid_attention(taps["mid"], taps["top"], self.gate1, self.spec.normalization)
        att2, a2 = grid_attention(taps["deep"], taps["top"], self.gate2, self.spec.normalization)
        v3 = T.global_avg_pool(taps["top"])
        scale_logits = [
            T.linear(att1, self.heads[0][0], self.heads[0][1]),
            T.linear(att2, self.heads[1][0], self.heads[1][1]),
            T.linear(v3, self.heads[2][0], self.heads[2][1]),
        ]
        if self.spec.aggregation == "ft":
            probs = [T.softmax(z, axis=-1) for z in scale_logits]
            logits = T.linear(T.concat(probs, axis=1), self.ft_w, self.ft_b)
        else:
            logits = aggregate_mean(scale_logits)
        return ForwardOutput(
            logits=logits,
            scale_logits=scale_logits,
            attention=[a1, a2],
            cam_features=taps["top"],
            cam_weights=np.asarray(self.heads[2][0].data),
        )

    def __call__(self, x: Tensor) -> ForwardOutput:
        return self.forward(x)

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        # copies, not views: callers keep snapshots across further training
        state = {name: t.data.copy() for name, t in self._params.items()}
        for prefix, bn in self._bn.items():
            state[f"{prefix}.running_mean"] = bn.mean.copy()
            state[f"{prefix}.running_var"] = bn.var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:4]
            extra = sorted(got - expected)[:4]
            raise CheckpointError(
                f"state mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        for name, t in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {t.shape}"
                )
            t.data = np.ascontiguousarray(arr.astype(t.dtype))
        for prefix, bn in self._bn.items():
            bn.mean = np.asarray(state[f"{prefix}.running_mean"], dtype=bn.mean.dtype).copy()
            bn.var = np.asarray(state[f"{prefix}.running_var"], dtype=bn.var.dtype).copy()


def aggregate_mean(scale_logits: List[Tensor]) -> Tensor:
    """Average the per-scale softmax distributions; return log probabilities.

    Softmax of the returned log probabilities reproduces the averaged
    distribution exactly, so downstream cross-entropy sees the true mean.
    """
    probs = [T.softmax(z, axis=-1) for z in scale_logits]
    acc = probs[0]
    for p in probs[1:]:
        acc = T.add(acc, p)
    return T.log(T.mul(acc, 1.0 / len(probs)))


def build_sononet(
    num_classes: int, n_base: int = 8, in_channels: int = 1, seed: int = 0
) -> Model:
    spec = ModelSpec(
        variant="sononet", num_classes=num_classes, n_base=n_base, in_channels=in_channels
    )
    return Model(spec, np.random.default_rng([seed, 0]))


def build_ag_sononet(
    num_classes: int,
    n_base: int = 8,
    in_channels: int = 1,
    aggregation: str = "mean",
    normalization: str = "minsum",
    seed: int = 0,
) -> Model:
    spec = ModelSpec(
        variant="ag",
        num_classes=num_classes,
        n_base=n_base,
        in_channels=in_channels,
        aggregation=aggregation,
        normalization=normalization,
    )
    return Model(spec, np.random.default_rng([seed, 1]))


def with_aggregation(model: Model, aggregation: str, seed: int = 0) -> Model:
    """Rebuild a model under a different aggregation strategy, carrying over
    every shared parameter and running statistic.  Used to bolt the learned
    aggregation head onto a model trained with probability averaging."""
    spec = replace(model.spec, aggregation=aggregation)
    new = Model(spec, np.random.default_rng([seed, 1]))
    state = new.state_dict()
    old = model.state_dict()
    for key in state:
        if key in old:
            state[key] = old[key]
    new.load_state_dict(state)
    new.train(model.training)
    return new


def init_from_sononet(ag: Model, donor: Model) -> None:
    """Copy the shared extractor (weights and running stats) from a trained
    baseline into an attention-gated model; gates and heads stay fresh."""
    donor_state = donor.state_dict()
    for name, t in ag._params.items():
        if name.startswith("features.") and name in donor_state:
            t.data = np.ascontiguousarray(donor_state[name].astype(t.dtype))
    for prefix, bn in ag._bn.items():
        key = f"{prefix}.running_mean"
        if key in donor_state:
            bn.mean = donor_state[key].astype(bn.mean.dtype).copy()
            bn.var = donor_state[f"{prefix}.running_var"].astype(bn.var.dtype).copy()


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count; must equal the registry total."""
    total = 0
    cin = spec.in_channels
    widths = []
    for n_convs, mult in zip(BLOCK_CONVS, BLOCK_WIDTH_MULT):
        cout = spec.n_base * mult
        for _ in range(n_convs):
            total += cout * cin * 9 + cout      # conv w + b
            total += 2 * cout                   # gamma + beta
            cin = cout
        widths.append(cout)
    k = spec.num_classes
    c_mid, c_top = widths[2], widths[4]
    if spec.variant == "sononet":
        total += k * c_top + k + 2 * k          # adaptation conv + bn
        return total
    total += gate_param_count(c_mid, c_top)
    total += gate_param_count(c_top, c_top)
    for din in (c_mid, c_top, c_top):
        total += k * din + k
    if spec.aggregation == "ft":
        total += k * 3 * k + k
    return total
