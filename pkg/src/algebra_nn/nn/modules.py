"""Small algebra-valued models built from the tape ops.

A model owns an ordered ``params`` dict of float64 arrays (the manifest
order used by checkpoints), batch-norm running statistics, and knows which
weights are prunable and how to describe itself to the cost model.
"""

from __future__ import annotations


import numpy as np

from .. import autodiff as ad
from ..algebra import AlgebraId, structure_table
from ..autodiff import Tape, Var
from ..cost import LayerSpec
from . import ops
from .functional import conv_output_size, glorot_init, resolve_padding
from .ops import BatchNormState

__all__ = ["Model", "MLPClassifier", "ConvClassifier", "GRULanguageModel", "embedding", "gru_forward"]


def embedding(weight: Var, idx: np.ndarray) -> Var:
    wv = weight.value
    idx = np.asarray(idx)

    def back(g):
        dw = np.zeros_like(wv)
        np.add.at(dw, idx, g)
        return (dw,)

    return weight.tape.record("embedding", wv[idx], (weight,), back)


class Model:
    """Base class. Subclasses fill ``params``, ``bn``, ``prunable``, ``frozen``."""

    kind = "model"

    def __init__(self, algebra):
        self.algebra = AlgebraId.parse(algebra)
        self.table = structure_table(self.algebra)
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.prunable: list[str] = []
        self.frozen: list[str] = []

    @property
    def dim(self) -> int:
        return self.algebra.dim

    @property
    def frozen_weights(self) -> list[str]:
        """Frozen algebra-valued weights (real lift and embedding maps excluded)."""
        return [n for n in self.frozen if n.endswith(".weight") and n.split(".")[0] not in ("lift", "embed")]

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v, k) for k, v in self.params.items()}

    def forward(self, tape: Tape, p: dict[str, Var], x, training: bool = False,
                rng: np.random.Generator | None = None) -> Var:
        raise NotImplementedError

    def loss(self, tape: Tape, p: dict[str, Var], batch, training: bool = True,
             rng: np.random.Generator | None = None) -> tuple[Var, float]:
        """Cross-entropy over norm logits; returns ``(loss, accuracy)``."""
        x, y = batch
        logits = self.forward(tape, p, x, training, rng)
        loss = ad.softmax_cross_entropy(logits, y)
        acc = float(np.mean(np.argmax(logits.value, axis=-1) == y))
        return loss, acc

    def predict(self, x) -> np.ndarray:
        tape = Tape()
        return self.forward(tape, self.bind(tape), x, training=False).value

    def layer_specs(self) -> list[LayerSpec]:
        raise NotImplementedError

    def weight_layer(self, name: str) -> str:
        """Cost-model layer name for a prunable weight parameter."""
        return name.rsplit(".", 1)[0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"])
            st.running_var = np.array(arrays[f"{name}.running_var"])

    def num_real_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # shared building blocks

    def _add_lift(self, channels: int, rng, mode: str = "affine", hidden: int = 0) -> None:
        extra = self.dim - 1
        self.lift_mode = mode if extra else "none"
        self.lift_hidden = hidden if mode == "mlp" else 0
        if not extra:
            return
        src = channels
        if self.lift_mode == "mlp":
            h = hidden or self.dim * channels
            self.lift_hidden = h
            lim = np.sqrt(6.0 / (channels + h))
            self.params["lift.hidden_w"] = rng.uniform(-lim, lim, (h, channels))
            self.params["lift.hidden_b"] = np.zeros(h)
            src = h
        lim = np.sqrt(6.0 / (src + channels))
        self.params["lift.weight"] = rng.uniform(-lim, lim, (extra, channels, src))
        self.params["lift.bias"] = np.zeros((extra, channels))
        if self.lift_mode == "zeros":
            self.params["lift.weight"][:] = 0.0
        self.frozen += [k for k in self.params if k.startswith("lift.")]

    def _lift(self, p, x: Var) -> Var:
        if self.dim == 1:
            return ad.reshape(x, x.shape + (1,))
        hidden = (p["lift.hidden_w"], p["lift.hidden_b"]) if self.lift_mode == "mlp" else None
        return ops.lift(x, p["lift.weight"], p["lift.bias"], hidden)

    def _lift_spec(self, channels: int, positions: int) -> list[LayerSpec]:
        if self.dim == 1:
            return []
        return [LayerSpec("lift", "lift", self.algebra, channels, channels,
                          positions=positions, hidden=self.lift_hidden)]

    def _add_linear(self, name: str, c_in: int, c_out: int, rng, bias: bool = True) -> None:
        self.params[f"{name}.weight"] = glorot_init((c_out, c_in), self.algebra, rng)
        if bias:
            self.params[f"{name}.bias"] = np.zeros((c_out, self.dim))

    def _add_bn(self, name: str, channels: int) -> None:
        self.params[f"{name}.gamma"] = np.ones((channels, self.dim))
        self.params[f"{name}.beta"] = np.zeros((channels, self.dim))
        self.bn[name] = BatchNormState(channels, self.dim)

    def _bn(self, p, name, x, training):
        return ops.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], training)


class MLPClassifier(Model):
    """Real features -> lift -> algebra linear layers -> norm logits.

    With ``lift="reshape"`` the real input is regrouped into
    ``in_features / dim`` tuples instead of being lifted, so every layer
    sees the same number of real activations as its real-valued twin.
    """

    kind = "mlp"

    def __init__(self, algebra, in_features: int, hidden: list[int], classes: int,
                 activation: str = "relu", lift: str = "affine", lift_hidden: int = 0,
                 batchnorm: bool = False, gate: bool = False, dropout: float = 0.0,
                 bias: bool = True, seed: int = 0):
        super().__init__(algebra)
        rng = np.random.default_rng(seed)
        self.in_features, self.hidden, self.classes = in_features, list(hidden), classes
        self.activation, self.use_bn, self.use_gate, self.dropout = activation, batchnorm, gate, dropout
        self.use_bias = bias
        self.reshape_input = lift == "reshape"
        if self.reshape_input:
            if in_features % self.dim:
                raise ValueError(f"{in_features} features do not split into tuples of {self.dim}")
            self.lift_mode, self.lift_hidden = "reshape", 0
            self.in_tuples = in_features // self.dim
        else:
            self._add_lift(in_features, rng, lift, lift_hidden)
            self.in_tuples = in_features
        widths = [self.in_tuples] + self.hidden
        for n, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self._add_linear(f"fc{n}", a, b, rng, bias)
            self.prunable.append(f"fc{n}.weight")
            if batchnorm:
                self._add_bn(f"bn{n}", b)
        self._add_linear("out", widths[-1], classes, rng, bias)
        self.frozen += [k for k in ("out.weight", "out.bias") if k in self.params]
        self.last_gate_fraction = 0.0

    def forward(self, tape, p, x, training=False, rng=None):
        if self.reshape_input:
            x = np.asarray(x)
            h = tape.constant(x.reshape(x.shape[:-1] + (self.in_tuples, self.dim)))
        else:
            h = self._lift(p, tape.constant(x))
        for n in range(1, len(self.hidden) + 1):
            h = ops.linear(h, p[f"fc{n}.weight"], p.get(f"fc{n}.bias"), self.table)
            if self.use_bn:
                h = self._bn(p, f"bn{n}", h, training)
            h = ad.activation(h, self.activation)
            if self.use_gate:
                h, self.last_gate_fraction = ops.tuple_gate(h)
            if training and self.dropout and rng is not None:
                h = ops.dropout(h, self.dropout, rng)
        out = ops.linear(h, p["out.weight"], p.get("out.bias"), self.table)
        return ops.readout(out)

    def layer_specs(self):
        specs = [] if self.reshape_input else self._lift_spec(self.in_features, 1)
        widths = [self.in_tuples] + self.hidden
        for n, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            specs.append(LayerSpec(f"fc{n}", "linear", self.algebra, a, b, bias=self.use_bias))
        specs.append(LayerSpec("out", "linear", self.algebra, widths[-1], self.classes, bias=self.use_bias))
        return specs


class ConvClassifier(Model):
    """Images ``(B, H, W, C)`` -> lift -> stem conv -> conv/BN/act blocks
    -> global average pool -> linear -> norm logits."""

    kind = "conv"

    def __init__(self, algebra, in_channels: int, stem: int, blocks: list[int], classes: int,
                 image_size: int = 32, activation: str = "swish", lift: str = "affine",
                 lift_hidden: int = 0, seed: int = 0):
        super().__init__(algebra)
        rng = np.random.default_rng(seed)
        self.in_channels, self.stem, self.blocks, self.classes = in_channels, stem, list(blocks), classes
        self.image_size, self.activation = image_size, activation
        self._add_lift(in_channels, rng, lift, lift_hidden)
        self._add_conv("stem", in_channels, stem, rng)
        self._add_bn("stem_bn", stem)
        self.frozen += ["stem.weight", "stem.bias"]
        c = stem
        for n, width in enumerate(self.blocks, start=1):
            self._add_conv(f"conv{n}", c, width, rng)
            self._add_bn(f"bn{n}", width)
            self.prunable.append(f"conv{n}.weight")
            c = width
        self._add_linear("out", c, classes, rng)
        self.frozen += ["out.weight", "out.bias"]

    def _add_conv(self, name, c_in, c_out, rng, k=3):
        self.params[f"{name}.weight"] = glorot_init((c_out, c_in, k, k), self.algebra, rng)
        self.params[f"{name}.bias"] = np.zeros((c_out, self.dim))

    @staticmethod
    def _stride(n: int) -> int:
        return 1 if n == 1 else 2

    def forward(self, tape, p, x, training=False, rng=None):
        h = self._lift(p, tape.constant(x))
        h = ops.conv2d(h, p["stem.weight"], p["stem.bias"], self.table, 1, "same")
        h = ad.activation(self._bn(p, "stem_bn", h, training), self.activation)
        for n in range(1, len(self.blocks) + 1):
            h = ops.conv2d(h, p[f"conv{n}.weight"], p[f"conv{n}.bias"], self.table, self._stride(n), "same")
            h = ad.activation(self._bn(p, f"bn{n}", h, training), self.activation)
        h = ops.global_avg_pool(h)
        return ops.readout(ops.linear(h, p["out.weight"], p["out.bias"], self.table))

    def layer_specs(self):
        size = self.image_size
        specs = self._lift_spec(self.in_channels, size * size)
        specs.append(LayerSpec("stem", "conv2d", self.algebra, self.in_channels, self.stem, (3, 3), size * size))
        c = self.stem
        for n, width in enumerate(self.blocks, start=1):
            s = self._stride(n)
            pads = resolve_padding("same", (3, 3), (s, s), (size, size))
            size = conv_output_size(size, 3, s, pads[0])
            specs.append(LayerSpec(f"conv{n}", "conv2d", self.algebra, c, width, (3, 3), size * size))
            c = width
        specs.append(LayerSpec("out", "linear", self.algebra, c, self.classes))
        return specs


GRU_GATES = ("ir", "iz", "in", "hr", "hz", "hn")


class GRULanguageModel(Model):
    """Byte-level model: real embedding -> lift -> algebra GRU -> linear -> norm logits."""

    kind = "gru"

    def __init__(self, algebra, embed: int, hidden: int, vocab: int = 256, seq_len: int = 32,
                 lift: str = "affine", lift_hidden: int = 0, seed: int = 0):
        super().__init__(algebra)
        rng = np.random.default_rng(seed)
        self.embed, self.hidden, self.vocab, self.seq_len = embed, hidden, vocab, seq_len
        self.params["embed.weight"] = rng.normal(0.0, 1.0, (vocab, embed))
        self.frozen.append("embed.weight")
        self._add_lift(embed, rng, lift, lift_hidden)
        for gate in GRU_GATES:
            c_in = embed if gate.startswith("i") else hidden
            self.params[f"gru.w_{gate}"] = glorot_init((hidden, c_in), self.algebra, rng)
            self.params[f"gru.b_{gate}"] = np.zeros((hidden, self.dim))
            self.prunable.append(f"gru.w_{gate}")
        self._add_linear("out", hidden, vocab, rng)
        self.frozen += ["out.weight", "out.bias"]

    def weight_layer(self, name):
        return "gru" if name.startswith("gru.") else super().weight_layer(name)

    def gru_params(self, p) -> dict[str, Var]:
        return {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith("gru.")}

    def forward(self, tape, p, tokens, training=False, rng=None):
        """Logits ``(B, T, vocab)`` predicting ``tokens[:, 1:]`` from ``tokens[:, :-1]``."""
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        gp = self.gru_params(p)
        h = tape.constant(np.zeros((b, self.hidden, self.dim)))
        outs = []
        for step in range(t - 1):
            x = self._lift(p, embedding(p["embed.weight"], tokens[:, step]))
            h = ops.gru_cell(x, h, gp, self.table)
            logits = ops.readout(ops.linear(h, p["out.weight"], p["out.bias"], self.table))
            outs.append(ad.reshape(logits, (b, 1, self.vocab)))
        return ad.concat(outs, axis=1)

    def loss(self, tape, p, batch, training=True, rng=None):
        tokens = np.asarray(batch)
        logits = self.forward(tape, p, tokens, training, rng)
        target = tokens[:, 1:]
        loss = ad.softmax_cross_entropy(logits, target)
        return loss, float(loss.value) / np.log(2.0)

    def layer_specs(self):
        steps = 1  # per generated byte
        return [
            LayerSpec("embed", "embedding", AlgebraId.parse("R"), self.vocab, self.embed),
            *self._lift_spec(self.embed, steps),
            LayerSpec("gru", "gru", self.algebra, self.embed, self.hidden, positions=steps),
            LayerSpec("out", "linear", self.algebra, self.hidden, self.vocab),
        ]


def gru_forward(x_t, h_prev, params: dict[str, np.ndarray], algebra) -> np.ndarray:
    """Plain-array GRU step. ``params`` keys: ``w_ir .. w_hn`` and optional ``b_*``."""
    table = structure_table(AlgebraId.parse(algebra))
    x_t, h_prev = np.asarray(x_t, dtype=np.float64), np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != table.dim or h_prev.shape[-1] != table.dim:
        raise ValueError("tuple axis does not match the algebra")
    if params["w_hr"].shape[0] != h_prev.shape[-2]:
        raise ValueError("hidden size mismatch")
    tape = Tape()
    pv = {k: tape.leaf(v, k) for k, v in params.items()}
    return ops.gru_cell(tape.constant(x_t), tape.constant(h_prev), pv, table).value
