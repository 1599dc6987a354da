"""Hardware-independent cost proxies: parameters, MACs, serialized size.

Counting conventions (chosen so that the deployment-grade figures are
reproduced exactly):

* conv params  = Cout * (9*Cin + 1), plus 2*Cout for its batch norm;
* fc params    = In*Out + Out;
* lstm params  = 4 * (H*(In+H) + H);
* tcn params   = Cout * (3*Cin + 1);
* conv MACs    = outH * outW * Cout * 9 * Cin;
* fc MACs      = In * Out;
* lstm MACs    = W steps * 4*H*(In+H)  (elementwise gate ops excluded);
* tcn MACs     = W * Cout * 3 * Cin;
* mv counts its single-frame net once for parameters and W times for MACs;
* pooling, activations and batch norm contribute no MACs.

Serialized sizes use the folded parameter count (batch norm absorbed):
4 bytes per float parameter, or 1 byte per int8 weight plus 4 bytes per
int32 bias.
"""

from __future__ import annotations

from dataclasses import dataclass

from .models import ModelSpec, parse_arch, plan_layers


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    size_bytes_float: int
    size_bytes_int8: int


def _as_spec(spec) -> ModelSpec:
    return parse_arch(spec) if isinstance(spec, str) else spec


def _layer_costs(spec: ModelSpec):
    """Per-layer (params, weights, biases, macs) for one pass of the net."""
    rows = []
    for lp in plan_layers(spec):
        if lp.op == "conv":
            weights = 9 * lp.c_in * lp.c_out
            oh, ow = lp.out_hw
            rows.append(
                {
                    "params": weights + lp.c_out + 2 * lp.c_out,  # + batch norm
                    "weights": weights,
                    "biases": lp.c_out,
                    "macs": oh * ow * lp.c_out * 9 * lp.c_in,
                }
            )
        elif lp.op == "fc":
            weights = lp.c_in * lp.c_out
            rows.append(
                {
                    "params": weights + lp.c_out,
                    "weights": weights,
                    "biases": lp.c_out,
                    "macs": weights,
                }
            )
        elif lp.op == "lstm":
            n_in, hidden = lp.c_in, lp.c_out
            weights = 4 * hidden * (n_in + hidden)
            rows.append(
                {
                    "params": weights + 4 * hidden,
                    "weights": weights,
                    "biases": 4 * hidden,
                    "macs": spec.window * 4 * hidden * (n_in + hidden),
                }
            )
        elif lp.op == "tcn":
            weights = 3 * lp.c_in * lp.c_out
            rows.append(
                {
                    "params": weights + lp.c_out,
                    "weights": weights,
                    "biases": lp.c_out,
                    "macs": spec.window * lp.c_out * 3 * lp.c_in,
                }
            )
        # pool / cat contribute nothing
    return rows


def _per_frame_multiplier(spec: ModelSpec) -> int:
    """How many times the conv/pool extractor runs per inference."""
    return spec.window if spec.family in ("mv", "cat", "lstm", "tcn") else 1


def count_params(spec) -> int:
    """Trainable parameter count (batch norm counted as 2 per channel)."""
    spec = _as_spec(spec)
    return sum(r["params"] for r in _layer_costs(spec))


def count_macs(spec) -> int:
    """Multiply-accumulate operations for one inference."""
    spec = _as_spec(spec)
    if spec.family == "mv":
        return spec.window * count_macs(spec.sf_twin())
    total = 0
    n_extractor_runs = _per_frame_multiplier(spec)
    plan = plan_layers(spec)
    rows = _layer_costs(spec)
    row_i = 0
    for lp in plan:
        if lp.op in ("pool", "cat"):
            continue
        macs = rows[row_i]["macs"]
        if lp.op == "conv":
            macs *= n_extractor_runs
        total += macs
        row_i += 1
    return total


def size_bytes(spec, precision: str) -> int:
    """Serialized model size under the given precision.

    Batch norm is folded away first, so float sizes are 4 bytes per
    remaining parameter and int8 sizes are 1 byte per weight plus 4 per
    bias (matching a flatbuffer-style export).
    """
    spec = _as_spec(spec)
    rows = _layer_costs(spec)
    weights = sum(r["weights"] for r in rows)
    biases = sum(r["biases"] for r in rows)
    if precision == "float":
        return 4 * (weights + biases)
    if precision == "int8":
        return weights + 4 * biases
    raise ValueError(f"unknown precision {precision!r}")


def cost_report(spec) -> CostReport:
    spec = _as_spec(spec)
    return CostReport(
        params=count_params(spec),
        macs=count_macs(spec),
        size_bytes_float=size_bytes(spec, "float"),
        size_bytes_int8=size_bytes(spec, "int8"),
    )
