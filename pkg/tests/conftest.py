"""Independent reference implementations used as test oracles."""
import numpy as np
import pytest


def naive_conv(x, w, b, stride, padding):
    """Six nested loops, float64, no shared code with the package."""
    n_img, n_ch, h, wd = x.shape
    m, _, kh, kw = w.shape
    xp = np.zeros((n_img, n_ch, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n_img, m, ho, wo))
    for n in range(n_img):
        for k in range(m):
            for oy in range(ho):
                for ox in range(wo):
                    acc = float(b[k])
                    for c in range(n_ch):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[k, c, i, j] * xp[n, c, oy * stride + i, ox * stride + j]
                    out[n, k, oy, ox] = acc
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(r, max_layers=4):
    """Random mix of dense, VQ, DL and opaque nodes with random metadata."""
    from pqaccel.model import Model, Node, OpaqueOp
    from pqaccel.quantizer import QuantScheme, quantize_layer
    from pqaccel.tensor import ConvLayer

    nodes = []
    for i in range(int(r.integers(1, max_layers + 1))):
        kind = ["conv", "vq", "dl", "opaque"][int(r.integers(4))]
        name = f"layer{i}_{kind}" if r.uniform() < 0.8 else f"L {i} ünï"
        group = ["", "feature-extraction", "head"][int(r.integers(3))]
        hw = None if r.uniform() < 0.2 else tuple(int(v) for v in r.integers(1, 9, 2))
        meta = dict(group=group, target=bool(r.integers(2)), input_hw=hw, relu=bool(r.integers(2)))
        if kind == "opaque":
            acc = None if r.uniform() < 0.5 else int(r.integers(0, 10**9))
            nodes.append(Node(name, OpaqueOp(int(r.integers(0, 10**12)), acc), **meta))
            continue
        m, n, k = int(r.integers(1, 5)), int(r.integers(1, 6)), int(r.choice([1, 3]))
        layer = ConvLayer(r.normal(size=(m, n, k, k)) * 10.0 ** r.integers(-3, 4), r.normal(size=m),
                          int(r.integers(1, 3)), int(r.integers(0, 2)), name)
        d = int(r.integers(1, n + 1))
        n_sub = m * k * k
        if kind == "vq":
            layer = quantize_layer(layer, QuantScheme("vq", d, k_vq=int(r.integers(1, n_sub + 1)),
                                                      seed=int(r.integers(100)), max_iter=5))
        elif kind == "dl" and n_sub >= 2:
            l_dl = int(r.integers(1, n_sub))
            k_dl = int(r.integers(l_dl + 1, n_sub + 1))
            rho = int(r.integers(1, min(d, l_dl) + 1))
            layer = quantize_layer(layer, QuantScheme("dl", d, l_dl=l_dl, k_dl=k_dl, rho=rho,
                                                      seed=int(r.integers(100)), dl_iters=3))
        nodes.append(Node(name, layer, **meta))
    return Model(f"model-{int(r.integers(1000))}", nodes)


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
