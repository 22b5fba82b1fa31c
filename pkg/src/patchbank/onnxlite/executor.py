"""CPU execution of the ONNX operator subset used by the supported backbones.

Convolutional stacks (plain and anti-aliased residual, depthwise/grouped,
squeeze-excite) and channels-last transformer-style blocks (layer norm, GELU
via Erf, matmul) are covered.  Evaluation is single-thread deterministic:
given the same model bytes and inputs, outputs are bit-identical.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import FormatError
from .wire import GraphDef, NodeDef


def _conv_output_size(size: int, kernel: int, stride: int, pad_head: int, pad_tail: int, dilation: int) -> int:
    effective = (kernel - 1) * dilation + 1
    return (size + pad_head + pad_tail - effective) // stride + 1


def _pool_windows(x: np.ndarray, kernel, strides, dilations=(1, 1)):
    """All sliding windows of a padded NCHW tensor: (n, c, oh, ow, kh, kw)."""
    kh, kw = kernel
    dh, dw = dilations
    eh, ew = (kh - 1) * dh + 1, (kw - 1) * dw + 1
    view = sliding_window_view(x, (eh, ew), axis=(2, 3))
    view = view[:, :, :: strides[0], :: strides[1], ::dh, ::dw]
    return view


def _op_conv(node: NodeDef, x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if node.attr("auto_pad", b"NOTSET") not in (b"NOTSET", "NOTSET"):
        raise FormatError("Conv: only explicit padding is supported")
    kh, kw = w.shape[2], w.shape[3]
    strides = [int(v) for v in node.attr("strides", [1, 1])]
    dilations = [int(v) for v in node.attr("dilations", [1, 1])]
    pads = [int(v) for v in node.attr("pads", [0, 0, 0, 0])]
    groups = int(node.attr("group", 1))
    n, c, h, width = x.shape
    m = w.shape[0]
    if pads != [0, 0, 0, 0]:
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    oh = _conv_output_size(h, kh, strides[0], pads[0], pads[2], dilations[0])
    ow = _conv_output_size(width, kw, strides[1], pads[1], pads[3], dilations[1])

    if groups == c and w.shape[1] == 1:
        # Depthwise: accumulate shifted views, no im2col blowup.
        cm = m // c  # channel multiplier, 1 for all supported models
        out = np.zeros((n, m, oh, ow), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                ii, jj = i * dilations[0], j * dilations[1]
                patch = x[:, :, ii : ii + (oh - 1) * strides[0] + 1 : strides[0],
                          jj : jj + (ow - 1) * strides[1] + 1 : strides[1]]
                if cm == 1:
                    out += patch * w[:, 0, i, j][None, :, None, None]
                else:
                    out += (patch[:, :, None] * w.reshape(c, cm, kh, kw)[None, :, :, i, j][..., None, None]).reshape(n, m, oh, ow)
        if b is not None:
            out += b[None, :, None, None]
        return out

    windows = _pool_windows(x, (kh, kw), strides, dilations)  # n,c,oh,ow,kh,kw
    cg = c // groups
    mg = m // groups
    out = np.empty((n, m, oh, ow), dtype=np.float32)
    wmat = w.reshape(groups, mg, cg * kh * kw)
    for g in range(groups):
        win = windows[:, g * cg : (g + 1) * cg]  # n,cg,oh,ow,kh,kw
        col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, cg * kh * kw)
        res = col @ wmat[g].T  # n, oh*ow, mg
        out[:, g * mg : (g + 1) * mg] = res.transpose(0, 2, 1).reshape(n, mg, oh, ow)
    if b is not None:
        out += b[None, :, None, None]
    return out


def _op_maxpool(node: NodeDef, x: np.ndarray) -> np.ndarray:
    kernel = [int(v) for v in node.attr("kernel_shape")]
    strides = [int(v) for v in node.attr("strides", [1, 1])]
    pads = [int(v) for v in node.attr("pads", [0, 0, 0, 0])]
    if int(node.attr("ceil_mode", 0)):
        raise FormatError("MaxPool: ceil_mode is not supported")
    if pads != [0, 0, 0, 0]:
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])),
                   constant_values=-np.inf)
    return _pool_windows(x, kernel, strides).max(axis=(4, 5))


def _op_averagepool(node: NodeDef, x: np.ndarray) -> np.ndarray:
    kernel = [int(v) for v in node.attr("kernel_shape")]
    strides = [int(v) for v in node.attr("strides", [1, 1])]
    pads = [int(v) for v in node.attr("pads", [0, 0, 0, 0])]
    include_pad = int(node.attr("count_include_pad", 0))
    if pads != [0, 0, 0, 0] and not include_pad:
        raise FormatError("AveragePool: padded pooling requires count_include_pad=1")
    if pads != [0, 0, 0, 0]:
        x = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    return _pool_windows(x, kernel, strides).mean(axis=(4, 5), dtype=np.float32)


def _op_pad(node: NodeDef, x: np.ndarray, pads: np.ndarray, constant=None) -> np.ndarray:
    mode = node.attr("mode", b"constant")
    mode = mode.decode("utf-8") if isinstance(mode, bytes) else mode
    rank = x.ndim
    pads = np.asarray(pads, dtype=np.int64)
    pairs = [(int(pads[i]), int(pads[i + rank])) for i in range(rank)]
    if mode == "constant":
        cval = 0.0 if constant is None else float(np.asarray(constant).reshape(()))
        return np.pad(x, pairs, mode="constant", constant_values=cval).astype(x.dtype)
    if mode == "reflect":
        return np.pad(x, pairs, mode="reflect")
    if mode == "edge":
        return np.pad(x, pairs, mode="edge")
    raise FormatError(f"Pad: unsupported mode {mode!r}")


def _op_batchnorm(node: NodeDef, x, scale, bias, mean, var) -> np.ndarray:
    eps = float(node.attr("epsilon", 1e-5))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (scale / np.sqrt(var + eps)).astype(np.float32)
    return x * inv.reshape(shape) + (bias - mean * inv).reshape(shape).astype(np.float32)


def _op_layernorm(node: NodeDef, x, scale, bias=None):
    axis = int(node.attr("axis", -1))
    eps = float(node.attr("epsilon", 1e-5))
    mean = x.mean(axis=axis, keepdims=True, dtype=np.float32)
    centered = x - mean
    var = np.mean(centered * centered, axis=axis, keepdims=True, dtype=np.float32)
    out = centered / np.sqrt(var + eps) * scale
    if bias is not None:
        out = out + bias
    return out.astype(np.float32)


def _op_gemm(node: NodeDef, a, b, c=None):
    alpha = float(node.attr("alpha", 1.0))
    beta = float(node.attr("beta", 1.0))
    if int(node.attr("transA", 0)):
        a = a.T
    if int(node.attr("transB", 0)):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out.astype(np.float32)


def _op_reshape(node: NodeDef, x, shape):
    target = [int(v) for v in np.asarray(shape).ravel()]
    target = [x.shape[i] if v == 0 else v for i, v in enumerate(target)]
    return np.ascontiguousarray(x).reshape(target)


_SIMPLE_OPS = {
    "Relu": lambda node, x: np.maximum(x, 0),
    "Sigmoid": lambda node, x: (1.0 / (1.0 + np.exp(-x))).astype(np.float32),
    "Erf": lambda node, x: erf(x).astype(np.float32),
    "Sqrt": lambda node, x: np.sqrt(x),
    "Add": lambda node, a, b: a + b,
    "Sub": lambda node, a, b: a - b,
    "Mul": lambda node, a, b: a * b,
    "Div": lambda node, a, b: a / b,
    "MatMul": lambda node, a, b: (a @ b).astype(np.float32),
    "Identity": lambda node, x: x,
    "Flatten": lambda node, x: x.reshape(x.shape[0], -1)
    if int(node.attr("axis", 1)) == 1
    else x.reshape(int(np.prod(x.shape[: int(node.attr("axis", 1))])), -1),
    "GlobalAveragePool": lambda node, x: x.mean(axis=(2, 3), keepdims=True, dtype=np.float32),
    "Transpose": lambda node, x: np.ascontiguousarray(
        np.transpose(x, [int(v) for v in node.attr("perm")])
    ),
    "Concat": lambda node, *xs: np.concatenate(xs, axis=int(node.attr("axis"))),
    "Conv": _op_conv,
    "MaxPool": _op_maxpool,
    "AveragePool": _op_averagepool,
    "Pad": _op_pad,
    "BatchNormalization": _op_batchnorm,
    "LayerNormalization": _op_layernorm,
    "Gemm": _op_gemm,
    "Reshape": _op_reshape,
}

SUPPORTED_OPS = tuple(sorted(_SIMPLE_OPS) + ["Constant"])


def run_graph(
    graph: GraphDef, feeds: dict[str, np.ndarray], outputs: list[str] | None = None
) -> dict[str, np.ndarray]:
    """Execute a graph on the given input feeds; returns the requested outputs.

    Exploits topological node order (required by the format), frees
    intermediates after their last consumer, and stops as soon as every
    requested output is available.
    """
    requested = [name for name, _ in graph.outputs] if outputs is None else list(outputs)
    declared = {name for name, _ in graph.outputs}
    for name in requested:
        if name not in declared:
            raise KeyError(f"{name!r} is not a graph output; available: {sorted(declared)}")

    values: dict[str, np.ndarray] = {}
    values.update(graph.initializers)
    for name, array in feeds.items():
        values[name] = np.asarray(array)

    last_use: dict[str, int] = {}
    for idx, node in enumerate(graph.nodes):
        for name in node.inputs:
            last_use[name] = idx

    pending = set(requested)
    results: dict[str, np.ndarray] = {}
    for name in requested:
        if name in values:  # output fed directly or an initializer
            results[name] = values[name]
            pending.discard(name)

    for idx, node in enumerate(graph.nodes):
        if not pending:
            break
        if node.op_type == "Constant":
            tensor = node.attr("value")
            if tensor is None:
                raise FormatError(f"Constant node {node.name!r} without value")
            values[node.outputs[0]] = tensor
        else:
            fn = _SIMPLE_OPS.get(node.op_type)
            if fn is None:
                raise FormatError(
                    f"unsupported op {node.op_type!r} (node {node.name!r}); "
                    f"supported: {', '.join(SUPPORTED_OPS)}"
                )
            try:
                args = [values[name] for name in node.inputs if name]
            except KeyError as exc:
                raise FormatError(
                    f"node {node.name!r} ({node.op_type}) consumes unknown value {exc}"
                ) from exc
            out = fn(node, *args)
            outs = out if isinstance(out, tuple) else (out,)
            for name, array in zip(node.outputs, outs):
                values[name] = array
        for name in node.outputs:
            if name in pending:
                results[name] = values[name]
                pending.discard(name)
        # Free dead intermediates (keep initializers cheapness aside, they die too).
        for name in node.inputs:
            if last_use.get(name) == idx and name not in pending and name not in results:
                values.pop(name, None)

    if pending:
        raise FormatError(f"graph finished without producing outputs: {sorted(pending)}")
    return {name: results[name] for name in requested}
