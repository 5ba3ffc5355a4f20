"""Small float64 graphs for gradient checks."""
import numpy as np

from piano import autodiff as ad
from piano.operators import TNO, VNO, TNOConfig, VNOConfig


def _ms(x, target):
    return ad.mean_square(ad.sub(x, target))


def primitive_graphs(seed=0):
    """``name -> (DiffGraph, inputs)``, one per primitive, all float64."""
    rng = np.random.default_rng(seed)

    def r(*shape, scale=1.0):
        return rng.normal(0.0, scale, shape)

    x4 = r(2, 3, 6, 6)
    t4 = r(2, 3, 6, 6)
    cases = {
        "conv2d": (lambda P, I: {"loss": _ms(ad.conv2d(P["x"], P["w"], P["b"]), I["t"])},
                   {"x": r(2, 3, 6, 6), "w": r(4, 3, 3, 3, scale=0.3), "b": r(4)},
                   {"t": r(2, 4, 6, 6)}),
        "conv2d_1x1": (lambda P, I: {"loss": _ms(ad.conv2d(P["x"], P["w"]), I["t"])},
                       {"x": r(2, 3, 5, 5), "w": r(2, 3, 1, 1)}, {"t": r(2, 2, 5, 5)}),
        "leaky_relu": (lambda P, I: {"loss": _ms(ad.leaky_relu(P["x"], 0.1), I["t"])},
                       {"x": x4.copy()}, {"t": t4}),
        "relu": (lambda P, I: {"loss": _ms(ad.relu(P["x"]), I["t"])}, {"x": x4.copy()},
                 {"t": t4}),
        "tanh": (lambda P, I: {"loss": _ms(ad.tanh(P["x"]), I["t"])}, {"x": x4.copy()},
                 {"t": t4}),
        "softplus": (lambda P, I: {"loss": _ms(ad.softplus(P["x"]), I["t"])}, {"x": x4.copy()},
                     {"t": t4}),
        "add": (lambda P, I: {"loss": _ms(ad.add(P["a"], P["b"]), I["t"])},
                {"a": r(2, 3, 4, 4), "b": r(1, 1, 4, 4)}, {"t": r(2, 3, 4, 4)}),
        "sub": (lambda P, I: {"loss": _ms(ad.sub(P["a"], P["b"]), I["t"])},
                {"a": r(2, 1, 4, 4), "b": r(2, 3, 4, 4)}, {"t": r(2, 3, 4, 4)}),
        "mul": (lambda P, I: {"loss": _ms(ad.mul(P["a"], P["b"]), I["t"])},
                {"a": r(2, 3, 4, 4), "b": r(1, 1, 4, 4)}, {"t": r(2, 3, 4, 4)}),
        "scale": (lambda P, I: {"loss": _ms(ad.scale(P["x"], -2.5), I["t"])},
                  {"x": r(2, 2, 4, 4)}, {"t": r(2, 2, 4, 4)}),
        "add_n": (lambda P, I: {"loss": _ms(ad.add_n([P["a"], P["b"], P["a"]]), I["t"])},
                  {"a": r(2, 2, 4, 4), "b": r(2, 2, 4, 4)}, {"t": r(2, 2, 4, 4)}),
        "concat": (lambda P, I: {"loss": _ms(ad.concat([P["a"], P["b"]]), I["t"])},
                   {"a": r(2, 1, 4, 4), "b": r(2, 3, 4, 4)}, {"t": r(2, 4, 4, 4)}),
        "take": (lambda P, I: {"loss": _ms(ad.take(P["x"], 1, 3), I["t"])},
                 {"x": r(2, 4, 4, 4)}, {"t": r(2, 2, 4, 4)}),
        "avg_down2": (lambda P, I: {"loss": _ms(ad.avg_down2(P["x"]), I["t"])},
                      {"x": r(2, 2, 8, 8)}, {"t": r(2, 2, 4, 4)}),
        "up2": (lambda P, I: {"loss": _ms(ad.up2(P["x"]), I["t"])},
                {"x": r(2, 2, 4, 4)}, {"t": r(2, 2, 8, 8)}),
        "channel_affine": (
            lambda P, I: {"loss": _ms(ad.channel_affine(P["x"], P["s"], P["h"]), I["t"])},
            {"x": r(2, 3, 4, 4), "s": r(3), "h": r(3)}, {"t": r(2, 3, 4, 4)}),
        "mean_square": (lambda P, I: {"loss": ad.mean_square(P["x"])}, {"x": r(2, 2, 4, 4)}, {}),
    }
    return {name: (ad.DiffGraph(build, params), inputs)
            for name, (build, params, inputs) in cases.items()}


SMALL_WIDTHS = [4, 8, 8]


def _bump_head(model, rng, std=0.05):
    # A zero head makes every interior gradient vanish; use a realistic trained scale.
    model.params["head.w"] = rng.normal(0.0, std, model.params["head.w"].shape)
    model.params["head.b"] = rng.normal(0.0, std, model.params["head.b"].shape)


def tno_graph(seed=0, size=8, s=2, channels=1):
    rng = np.random.default_rng(seed)
    model = TNO(TNOConfig(s=s, channels=channels, widths=SMALL_WIDTHS), seed=seed,
                dtype=np.float64)
    _bump_head(model, rng)
    n = 2
    inputs = {"hist": rng.normal(0.0, 1.0, (n, s * channels, size, size)),
              "dem": rng.normal(0.0, 1.0, (n, 1, size, size)),
              "target": rng.normal(0.0, 1.0, (n, s * channels, size, size))}

    def build(P, I):
        return {"loss": _ms(model.apply(P, I["hist"], I["dem"]), I["target"])}

    return ad.DiffGraph(build, model.params), inputs


def vno_graph(seed=0, size=8, s=2, channels=1):
    rng = np.random.default_rng(seed)
    model = VNO(VNOConfig(s=s, channels=channels, widths=SMALL_WIDTHS), seed=seed,
                dtype=np.float64)
    _bump_head(model, rng)
    n = 2
    inputs = {"frames": rng.normal(0.0, 1.0, (n, s * channels, size, size)),
              "target": rng.normal(0.0, 0.2, (n, 2 * s, size, size))}

    def build(P, I):
        return {"loss": _ms(model.apply(P, I["frames"]), I["target"])}

    return ad.DiffGraph(build, model.params), inputs
