"""Architecture grammar, model construction and forward prediction.

An architecture string looks like ``mc:w3:C8-P-C16-FC``:

* ``<family>`` is one of ``sf`` (single-frame), ``mc`` (multi-channel),
  ``mv`` (majority voting), ``cat`` (concatenated features), ``lstm``
  (CNN-LSTM) or ``tcn`` (CNN-TCN);
* ``w<W>`` is the input window length in frames;
* the token list describes the layers: ``C<n>`` a 3x3 conv with ``n``
  output channels followed by batch norm and ReLU, ``P`` a 2x2 max pool,
  ``Cat`` feature concatenation, ``L<h>`` an LSTM cell with ``h`` hidden
  units, ``T<c>`` a causal 1D conv with ``c`` output channels, ``FC<n>``
  a hidden fully-connected layer with ReLU, and a bare terminal ``FC``
  for the output layer (one unit per count class).

This string form is the stable public naming used in files, the CLI and
reports.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import (
    BatchNorm2D,
    CausalConv1D,
    Conv2D,
    Dense,
    FakeQuantAct,
    Layer,
    LSTM,
    MaxPool2x2,
    ReLU,
    softmax,
)

FAMILIES = ("sf", "mc", "mv", "cat", "lstm", "tcn")
MULTI_FRAME_WINDOWS = (3, 5, 7, 9)
FRAME_SHAPE = (8, 8)
DEFAULT_CLASSES = 4

_TOKEN_RE = re.compile(r"^(C|P|Cat|L|T|FC)(\d+)?$")


class ArchError(ValueError):
    """Raised for unparsable or geometrically infeasible architectures."""


@dataclass(frozen=True)
class ModelSpec:
    family: str
    window: int
    tokens: tuple[str, ...]
    n_classes: int = DEFAULT_CLASSES

    def render(self) -> str:
        return f"{self.family}:w{self.window}:{'-'.join(self.tokens)}"

    def __str__(self) -> str:
        return self.render()

    def extractor_tokens(self) -> tuple[str, ...]:
        """The conv/pool prefix shared by the multi-frame families."""
        out = []
        for tok in self.tokens:
            if tok == "P" or tok.startswith("C") and tok != "Cat":
                out.append(tok)
            else:
                break
        return tuple(out)

    def sf_twin(self) -> "ModelSpec":
        """The single-frame spec with the same layer stack (for mv)."""
        return ModelSpec("sf", 1, self.tokens, self.n_classes)


def parse_arch(text: str) -> ModelSpec:
    parts = text.strip().split(":")
    if len(parts) != 3:
        raise ArchError(f"expected '<family>:w<W>:<tokens>', got {text!r}")
    family, wpart, tokpart = parts
    if family not in FAMILIES:
        raise ArchError(f"unknown family {family!r}")
    m = re.fullmatch(r"w(\d+)", wpart)
    if not m:
        raise ArchError(f"bad window token {wpart!r}")
    window = int(m.group(1))
    tokens = list(tokpart.split("-")) if tokpart else []
    # a bare FC before the terminal position means the default 64-unit
    # hidden layer (common shorthand leaves the default width implicit)
    for j in range(len(tokens) - 1):
        if tokens[j] == "FC":
            tokens[j] = "FC64"
    spec = ModelSpec(family, window, tuple(tokens))
    validate_spec(spec)
    return spec


def validate_spec(spec: ModelSpec) -> None:
    if spec.family not in FAMILIES:
        raise ArchError(f"unknown family {spec.family!r}")
    allowed = {
        "sf": (1,),
        "mc": (1,) + MULTI_FRAME_WINDOWS,
    }.get(spec.family, MULTI_FRAME_WINDOWS)
    if spec.window not in allowed:
        raise ArchError(
            f"{spec.family} requires window in {allowed}, got {spec.window}"
        )
    plan_layers(spec)  # raises on bad tokens / infeasible geometry


@dataclass
class LayerPlan:
    op: str  # conv | pool | lstm | tcn | cat | fc
    c_in: int = 0
    c_out: int = 0
    out_hw: tuple[int, int] = (0, 0)
    activation: str = "none"


def plan_layers(spec: ModelSpec) -> list[LayerPlan]:
    """Token list -> validated layer plan with resolved geometry."""
    tokens = list(spec.tokens)
    if not tokens:
        raise ArchError("empty layer list")
    plan: list[LayerPlan] = []
    h, w = FRAME_SHAPE
    channels = spec.window if spec.family == "mc" else 1
    n_convs = 0
    n_pools = 0
    i = 0
    # conv/pool prefix
    while i < len(tokens):
        tok = tokens[i]
        m = _TOKEN_RE.match(tok)
        if not m:
            raise ArchError(f"unknown token {tok!r}")
        kind, num = m.group(1), m.group(2)
        if kind == "C" and num is not None:
            if n_convs >= 2:
                raise ArchError("at most two conv layers are supported")
            if h < 3 or w < 3:
                raise ArchError(f"conv infeasible on {h}x{w} input ({tok})")
            c_out = int(num)
            plan.append(LayerPlan("conv", channels, c_out, (h - 2, w - 2), "relu"))
            h, w, channels = h - 2, w - 2, c_out
            n_convs += 1
        elif kind == "P" and num is None:
            if n_convs != 1 or n_pools:
                raise ArchError("pooling is only supported right after the first conv")
            if h % 2 or w % 2:
                raise ArchError(f"pool infeasible on odd {h}x{w} extent")
            plan.append(LayerPlan("pool", channels, channels, (h // 2, w // 2)))
            h, w = h // 2, w // 2
            n_pools += 1
        else:
            break
        i += 1
    if n_convs == 0:
        raise ArchError("architecture needs at least one conv layer")
    features = h * w * channels

    # family-specific temporal stage
    head_in = features
    tok = tokens[i] if i < len(tokens) else ""
    if spec.family == "cat":
        if tok != "Cat":
            raise ArchError("cat family requires a Cat token after the extractor")
        plan.append(LayerPlan("cat", features, features))
        head_in = spec.window * features
        i += 1
    elif spec.family == "lstm":
        m = re.fullmatch(r"L(\d+)", tok)
        if not m:
            raise ArchError("lstm family requires an L<h> token after the extractor")
        hidden = int(m.group(1))
        plan.append(LayerPlan("lstm", features, hidden))
        head_in = hidden
        i += 1
    elif spec.family == "tcn":
        m = re.fullmatch(r"T(\d+)", tok)
        if not m:
            raise ArchError("tcn family requires a T<c> token after the extractor")
        c_out = int(m.group(1))
        plan.append(LayerPlan("tcn", features, c_out, activation="relu"))
        head_in = spec.window * c_out
        i += 1
    elif tok in ("Cat",) or re.fullmatch(r"[LT]\d+", tok or "X"):
        raise ArchError(f"token {tok!r} is not valid for family {spec.family!r}")

    # fully-connected head: at most one hidden FC, then the bare output FC
    n_hidden = 0
    while i < len(tokens):
        tok = tokens[i]
        m = re.fullmatch(r"FC(\d+)?", tok)
        if not m:
            raise ArchError(f"unexpected token {tok!r} in head position")
        if m.group(1) is not None:
            if n_hidden or i + 1 == len(tokens):
                raise ArchError("at most one hidden FC, and the last FC must be bare")
            units = int(m.group(1))
            plan.append(LayerPlan("fc", head_in, units, activation="relu"))
            head_in = units
            n_hidden += 1
        else:
            if i + 1 != len(tokens):
                raise ArchError("bare FC must be the terminal token")
            plan.append(LayerPlan("fc", head_in, spec.n_classes))
        i += 1
    if not plan or plan[-1].op != "fc" or plan[-1].activation != "none":
        raise ArchError("architecture must end with a bare output FC")
    return plan


@dataclass
class Prediction:
    probabilities: np.ndarray  # (K,), sums to 1
    count: int
    votes: list[int] | None = None  # per-frame votes, mv only


class Model:
    """An instantiated architecture: layer objects plus forward/backward.

    ``extractor`` holds the conv/pool stack (run per frame for the
    multi-frame families except mc), ``temporal`` the optional LSTM/TCN
    stage and ``head`` the fully-connected layers. Fake-quantization
    layers are interleaved on QAT-prepared models.
    """

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        self.folded = False
        self.input_fq: FakeQuantAct | None = None
        self.extractor: list[Layer] = []
        self.temporal: list[Layer] = []
        self.head: list[Layer] = []

    # -- structure ---------------------------------------------------

    def all_layers(self) -> list[Layer]:
        return self.extractor + self.temporal + self.head

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for gname, group in (
            ("extractor", self.extractor),
            ("temporal", self.temporal),
            ("head", self.head),
        ):
            for i, layer in enumerate(group):
                for pname, arr in layer.params.items():
                    out.append((f"{gname}.{i}.{pname}", arr))
        return out

    def set_parameters(self, named: dict[str, np.ndarray]) -> None:
        groups = {"extractor": self.extractor, "temporal": self.temporal, "head": self.head}
        for key, arr in named.items():
            gname, idx, pname = key.split(".")
            layer = groups[gname][int(idx)]
            if layer.params[pname].shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}")
            layer.params[pname] = arr.astype(layer.params[pname].dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running stats and observer ranges."""
        state = dict(self.parameters())
        for gname, group in (
            ("extractor", self.extractor),
            ("temporal", self.temporal),
            ("head", self.head),
        ):
            for i, layer in enumerate(group):
                if isinstance(layer, BatchNorm2D):
                    state[f"{gname}.{i}.running_mean"] = layer.running_mean
                    state[f"{gname}.{i}.running_var"] = layer.running_var
                if isinstance(layer, FakeQuantAct) and layer.lo is not None:
                    state[f"{gname}.{i}.observer"] = np.array([layer.lo, layer.hi])
        if self.input_fq is not None and self.input_fq.lo is not None:
            state["input.0.observer"] = np.array([self.input_fq.lo, self.input_fq.hi])
        return {k: v.copy() for k, v in state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        groups = {"extractor": self.extractor, "temporal": self.temporal, "head": self.head}
        params = {}
        for key, arr in state.items():
            gname, idx, pname = key.split(".")
            if gname == "input":
                self.input_fq.lo, self.input_fq.hi = float(arr[0]), float(arr[1])
                continue
            layer = groups[gname][int(idx)]
            if pname == "observer":
                layer.lo, layer.hi = float(arr[0]), float(arr[1])
            elif pname in ("running_mean", "running_var"):
                setattr(layer, pname, arr.astype(getattr(layer, pname).dtype).copy())
            else:
                params[key] = arr
        self.set_parameters(params)

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for gname, group in (
            ("extractor", self.extractor),
            ("temporal", self.temporal),
            ("head", self.head),
        ):
            for i, layer in enumerate(group):
                for pname in layer.params:
                    out.append((f"{gname}.{i}.{pname}", layer.grads[pname]))
        return out

    # -- forward / backward -------------------------------------------

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.spec.window or x.shape[2:] != FRAME_SHAPE:
            raise ValueError(
                f"expected windows of shape (N, {self.spec.window}, 8, 8), got {x.shape}"
            )
        return x

    def _run(self, layers, x, train):
        for layer in layers:
            x = layer.forward(x, train=train)
        return x

    def _run_back(self, layers, d):
        for layer in reversed(layers):
            d = layer.backward(d)
        return d

    def logits(self, windows, train=False):
        """Forward pass to output logits.

        Returns (N, K) for all families except mv, which returns the
        per-frame logits (N, W, K).
        """
        x = self._as_batch(windows)
        n, w = x.shape[:2]
        fam = self.spec.family
        if fam == "sf":
            return self.single_frame_logits(x[:, 0], train)
        if fam == "mv":
            per = self.single_frame_logits(x.reshape(n * w, 8, 8), train)
            return per.reshape(n, w, -1)
        if self.input_fq is not None:
            x = self.input_fq.forward(x, train=train)
        if fam == "mc":
            feat = self._run(self.extractor, x.transpose(0, 2, 3, 1), train)
            self._feat_shape = feat.shape
            return self._run(self.head, feat.reshape(n, -1), train)
        # shared per-frame extractor
        feat = self._run(self.extractor, x.reshape(n * w, 8, 8)[..., None], train)
        self._feat_shape = feat.shape
        feat = feat.reshape(n, w, -1)
        if fam == "cat":
            self._seq_shape = feat.shape
            z = feat.reshape(n, -1)
        elif fam == "lstm":
            z = self._run(self.temporal, feat, train)
        else:  # tcn
            seq = self._run(self.temporal, feat, train)
            self._seq_shape = seq.shape
            z = seq.reshape(n, -1)
        return self._run(self.head, z, train)

    def single_frame_logits(self, frames, train=False):
        """Run the sf layer stack on (N, 8, 8) frames (used by sf and mv)."""
        x = np.asarray(frames, dtype=self.dtype)
        if self.input_fq is not None:
            x = self.input_fq.forward(x, train=train)
        feat = self._run(self.extractor, x[..., None], train)
        self._feat_shape = feat.shape
        return self._run(self.head, feat.reshape(feat.shape[0], -1), train)

    def backward(self, dlogits):
        fam = self.spec.family
        if fam == "mv":
            raise RuntimeError("mv models train through their single-frame twin")
        d = self._run_back(self.head, dlogits)
        if fam in ("sf", "mc"):
            d = self._run_back(self.extractor, d.reshape(self._feat_shape))
        elif fam == "cat":
            d = d.reshape(self._seq_shape)
            d = self._run_back(self.extractor, d.reshape(self._feat_shape))
        elif fam == "lstm":
            d = self._run_back(self.temporal, d)
            d = self._run_back(self.extractor, d.reshape(self._feat_shape))
        else:  # tcn
            d = self._run_back(self.temporal, d.reshape(self._seq_shape))
            d = self._run_back(self.extractor, d.reshape(self._feat_shape))
        # the input fake-quant gradient is never consumed; skip its STE mask
        return d

    def backward_single_frame(self, dlogits):
        d = self._run_back(self.head, dlogits)
        return self._run_back(self.extractor, d.reshape(self._feat_shape))

    def zero_grads(self):
        for layer in self.all_layers():
            layer.zero_grads()

    def predict(self, windows) -> list[Prediction]:
        out = self.logits(windows, train=False)
        if self.spec.family == "mv":
            return [majority_vote(per_frame) for per_frame in out]
        probs = softmax(out, axis=-1)
        return [
            Prediction(probabilities=p, count=int(np.argmax(p))) for p in probs
        ]

    def predict_counts(self, windows) -> np.ndarray:
        return np.array([p.count for p in self.predict(windows)], dtype=int)


def majority_vote(per_frame_logits) -> Prediction:
    """Aggregate (W, K) per-frame logits by mode of the per-frame argmax.

    Ties between equally frequent classes go to the one with the larger
    summed softmax probability over the window; exact probability ties
    fall back to the smaller count.
    """
    logits = np.asarray(per_frame_logits)
    probs = softmax(logits, axis=-1)
    votes = np.argmax(logits, axis=-1)
    counts = np.bincount(votes, minlength=logits.shape[-1])
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if len(tied) == 1:
        winner = int(tied[0])
    else:
        mass = probs.sum(axis=0)[tied]
        winner = int(tied[np.argmax(mass)])  # argmax: first max -> smaller count
    return Prediction(
        probabilities=probs.mean(axis=0),
        count=winner,
        votes=[int(v) for v in votes],
    )


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Instantiate a spec with deterministic, seed-driven initialization.

    Conv/FC/TCN weights use He-normal init (std = sqrt(2/fan_in)); LSTM
    matrices use Xavier-uniform. Biases start at zero except the LSTM
    forget gate (1.0); batch norm starts at identity.
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    model = Model(spec, seed, dtype)
    for lp in plan_layers(spec):
        if lp.op == "conv":
            conv = Conv2D(lp.c_in, lp.c_out, dtype)
            conv.params["kernel"] = rng.normal(
                0.0, np.sqrt(2.0 / (9 * lp.c_in)), conv.params["kernel"].shape
            ).astype(dtype)
            model.extractor += [conv, BatchNorm2D(lp.c_out, dtype=dtype), ReLU()]
        elif lp.op == "pool":
            model.extractor.append(MaxPool2x2())
        elif lp.op == "lstm":
            lstm = LSTM(lp.c_in, lp.c_out, dtype)
            for key in ("wx", "wh"):
                fan_in = lstm.params[key].shape[0]
                limit = np.sqrt(6.0 / (fan_in + lp.c_out))
                lstm.params[key] = rng.uniform(
                    -limit, limit, lstm.params[key].shape
                ).astype(dtype)
            lstm.params["bias"][lp.c_out : 2 * lp.c_out] = 1.0  # forget gate
            model.temporal.append(lstm)
        elif lp.op == "tcn":
            tcn = CausalConv1D(lp.c_in, lp.c_out, dtype)
            tcn.params["kernel"] = rng.normal(
                0.0, np.sqrt(2.0 / (3 * lp.c_in)), tcn.params["kernel"].shape
            ).astype(dtype)
            model.temporal.append(tcn)
        elif lp.op == "fc":
            fc = Dense(lp.c_in, lp.c_out, lp.activation, dtype)
            fc.params["weight"] = rng.normal(
                0.0, np.sqrt(2.0 / lp.c_in), fc.params["weight"].shape
            ).astype(dtype)
            model.head.append(fc)
        # "cat" needs no layer object
    return model


# -- enumeration -----------------------------------------------------

CHANNEL_SET = (8, 16, 32, 64)
HEAD_SET = (8, 16, 32, 64)


def _sf_token_grid(preset: str = "full") -> list[tuple[str, ...]]:
    grids = []
    for c1 in CHANNEL_SET:
        for pool in (False, True):
            prefix = (f"C{c1}",) + (("P",) if pool else ())
            for head in (("FC",), ("FC64", "FC")):
                grids.append(prefix + head)
                for c2 in CHANNEL_SET:
                    if preset == "sf-paper" and not pool:
                        continue  # the 48-variant reading: 2 convs imply a pool
                    grids.append(prefix + (f"C{c2}",) + head)
    return grids


def enumerate_sf(preset: str = "full") -> list[ModelSpec]:
    """All feasible single-frame variants.

    ``full`` explores both conv channel counts independently, with and
    without pooling (80 variants). The documented ``sf-paper`` preset
    makes the pool mandatory for 2-conv configurations, which yields the
    48-variant grid.
    """
    specs = []
    seen = set()
    for tokens in _sf_token_grid(preset):
        spec = ModelSpec("sf", 1, tokens)
        if spec.render() in seen:
            continue
        try:
            validate_spec(spec)
        except ArchError:
            continue
        seen.add(spec.render())
        specs.append(spec)
    return specs


def enumerate_family(
    family: str,
    windows=MULTI_FRAME_WINDOWS,
    heads=HEAD_SET,
    extractors: list[str] | None = None,
    preset: str = "full",
) -> list[ModelSpec]:
    """Enumerate one family's hyper-parameter grid.

    ``extractors`` is required for the dependent families: full sf token
    strings for ``mv``, conv/pool prefixes (e.g. ``C8-P-C16``) for
    ``cat``/``lstm``/``tcn``.
    """
    if family == "sf":
        return enumerate_sf(preset)
    if family == "mc":
        return [
            ModelSpec("mc", w, spec.tokens)
            for w in windows
            for spec in enumerate_sf(preset)
        ]
    if extractors is None or not extractors:
        raise ValueError(f"family {family!r} needs a non-empty extractor list")
    specs = []
    if family == "mv":
        for w in windows:
            for tokens in extractors:
                specs.append(parse_arch(f"mv:w{w}:{tokens}"))
        return specs
    token_fmt = {
        "cat": "{p}-Cat-FC{h}-FC",
        "lstm": "{p}-L{h}-FC",
        "tcn": "{p}-T{h}-FC",
    }.get(family)
    if token_fmt is None:
        raise ValueError(f"unknown family {family!r}")
    for w in windows:
        for h in heads:
            for prefix in extractors:
                specs.append(
                    parse_arch(f"{family}:w{w}:" + token_fmt.format(p=prefix, h=h))
                )
    return specs
