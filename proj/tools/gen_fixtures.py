#!/usr/bin/env python3
"""Regenerates the graph fixtures under fixtures/.

Shapes are written explicitly; the C++ loader validates them.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


class Builder:
    def __init__(self, resolution, width_multiplier):
        self.layers = []
        self.resolution = resolution
        self.width_multiplier = width_multiplier

    def _add(self, kind, inputs, in_shape, out_shape, out_ch, k=1, s=1, p=0,
             params=0, bias=0):
        lid = len(self.layers)
        self.layers.append({
            "id": lid,
            "kind": kind,
            "input_ids": inputs,
            "out_channels": out_ch,
            "kernel_h": k,
            "kernel_w": k,
            "stride": s,
            "padding": p,
            "input_shape": list(in_shape),
            "output_shape": list(out_shape),
            "param_count": params,
            "bias_count": bias,
        })
        return lid

    def shape(self, lid):
        return self.layers[lid]["output_shape"]

    def input(self, c, h, w):
        return self._add("input", [], (c, h, w), (c, h, w), c)

    def conv(self, src, out_ch, k, s, p, kind="conv2d"):
        c, h, w = self.shape(src)
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if kind == "depthwise_conv2d":
            out_ch = c
            params = c * k * k
        else:
            params = c * out_ch * k * k
        return self._add(kind, [src], (c, h, w), (out_ch, oh, ow), out_ch, k, s, p,
                         params, out_ch)

    def dw(self, src, s):
        return self.conv(src, 0, 3, s, 1, "depthwise_conv2d")

    def pw(self, src, out_ch):
        return self.conv(src, out_ch, 1, 1, 0, "pointwise_conv2d")

    def avg_pool(self, src, k, s):
        c, h, w = self.shape(src)
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        return self._add("avg_pool", [src], (c, h, w), (c, oh, ow), c, k, s, 0)

    def fc(self, src, out):
        c, h, w = self.shape(src)
        return self._add("fully_connected", [src], (c, h, w), (out, 1, 1), out,
                         1, 1, 0, c * h * w * out, out)

    def add(self, a, b):
        sh = self.shape(a)
        assert sh == self.shape(b)
        return self._add("add_residual", [a, b], sh, sh, sh[0])

    def output(self, src):
        sh = self.shape(src)
        return self._add("output", [src], sh, sh, sh[0])

    def dump(self, name):
        doc = {"resolution": self.resolution,
               "width_multiplier": self.width_multiplier,
               "layers": self.layers}
        (OUT / name).write_text(json.dumps(doc, indent=1) + "\n")


def mobilenet_v1(resolution=224, alpha=1.0, classes=1000):
    b = Builder(resolution, alpha)
    ch = lambda c: int(c * alpha)
    x = b.input(3, resolution, resolution)
    x = b.conv(x, ch(32), 3, 2, 1)
    plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)] + \
           [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    for out_ch, s in plan:
        x = b.dw(x, s)
        x = b.pw(x, ch(out_ch))
    _, h, _ = b.shape(x)
    x = b.avg_pool(x, h, 1)
    x = b.fc(x, classes)
    b.output(x)
    return b


def toy_cnn():
    b = Builder(28, 1.0)
    x = b.input(1, 28, 28)
    x = b.conv(x, 8, 3, 2, 1)
    x = b.conv(x, 32, 3, 2, 1)
    x = b.dw(x, 1)
    x = b.pw(x, 64)
    x = b.avg_pool(x, 7, 1)
    x = b.fc(x, 10)
    b.output(x)
    return b


def residual_toy():
    b = Builder(8, 1.0)
    x = b.input(2, 8, 8)
    x = b.conv(x, 4, 3, 1, 1)
    a = b.conv(x, 4, 3, 1, 1)
    y = b.conv(a, 4, 3, 1, 1)
    r = b.add(x, y)
    r = b.avg_pool(r, 8, 1)
    r = b.fc(r, 3)
    b.output(r)
    return b


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    mobilenet_v1().dump("mobilenet_v1_224_100.json")
    toy_cnn().dump("toycnn_mnist.json")
    residual_toy().dump("residual_toy.json")
