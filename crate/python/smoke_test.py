"""Smoke test for the `saic` Python extension.

Usage: python python/smoke_test.py [RUN_DIR]

RUN_DIR is an output directory written by `saic train-task` and
`saic train-codec`; when given, the checkpoint-backed classes are exercised
too.
"""

import math
import os
import random
import sys

import saic


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok   {what}")


def pure_functions():
    q = saic.quantize([0.0, 0.5, 0.5000001, 0.9, 1.0])
    check(q == [0.0, 0.0, 1.0, 1.0, 1.0], "quantize threshold at 0.5")

    for c, expected in [(8, 0.125), (16, 0.25), (32, 0.5)]:
        bits, pixels, rate = saic.bpp((c, 12, 12), 96, 96)
        check(bits * 1.0 / pixels == expected and rate == expected, f"bpp of ({c},12,12) on 96x96")

    rng = random.Random(0)
    bits = [float(rng.random() > 0.5) for _ in range(8 * 12 * 12)]
    data = saic.encode_bitstream(bits, (8, 12, 12), 96, 96)
    h, w, shape, back = saic.decode_bitstream(data)
    check((h, w, shape) == (96, 96, (8, 12, 12)), "bitstream header round trip")
    check([float(b) for b in back] == bits, "bitstream payload round trip")
    corrupt = bytearray(data)
    corrupt[20] ^= 0x01
    try:
        saic.decode_bitstream(bytes(corrupt))
        check(False, "corrupted payload rejected")
    except OSError:
        check(True, "corrupted payload rejected")

    raw = [0.1, -0.3, 0.02, 0.5]
    check(saic.map_weights(raw, 0.0) == [1.0] * 4, "tau = 0 gives uniform weights")
    w = saic.map_weights(raw, 5.0, 2.0)
    check(abs(sum(w) - 2.0) < 1e-12 and max(w) == w[3], "mapped weights sum to r")

    shape = [2, 4, 3, 3]
    n = 2 * 4 * 3 * 3
    f = [rng.gauss(0, 1) for _ in range(n)]
    g = [rng.gauss(0, 1) for _ in range(n)]
    check(
        abs(saic.semantic_loss(f, g, shape, [1.0] * 4) - saic.feature_loss(f, g, shape)) < 1e-6,
        "uniform semantic loss equals feature loss",
    )
    img = [rng.random() for _ in range(3 * 16 * 16)]
    check(saic.pixel_loss(img, img, [1, 3, 16, 16]) == 0.0, "pixel loss of identical images")
    check(saic.psnr(img, img, [1, 3, 16, 16]) == 100.0, "PSNR cap on identical images")
    check(abs(saic.ssim(img, img, [1, 3, 16, 16]) - 1.0) < 1e-12, "SSIM of identical images")
    acc, f1 = saic.classification_metrics([0, 1, 1, 2], [0, 1, 2, 2], 3)
    check(acc == 0.75 and 0 < f1 < 1, "classification metrics")

    y, yp = [], []
    for _ in range(2000):
        a = rng.gauss(0, 1)
        y.append(a)
        yp.append(0.9 * a + math.sqrt(1 - 0.81) * rng.gauss(0, 1))
    est = saic.estimate_si(y, yp, 1)
    check(est["si"] > 0.3 and est["n"] == 1000, f"CLUB on correlated pairs (SI = {est['si']:.3f})")


def checkpoints(run_dir):
    codec = saic.Codec.load(os.path.join(run_dir, "pretrain.json"))
    task = saic.TaskNetwork.load(os.path.join(run_dir, "task.json"))
    c, h, w = codec.image_shape
    check(task.num_classes > 1, f"loaded {codec!r}")
    rng = random.Random(1)
    x = [rng.random() for _ in range(2 * c * h * w)]
    streams = codec.compress(x)
    check(len(streams) == 2, "one bitstream per image")
    recon = codec.decompress(streams)
    check(len(recon) == len(x) and all(0.0 <= v <= 1.0 for v in recon), "reconstruction shape and range")
    check(recon == codec.reconstruct(x), "decompress(compress(x)) equals reconstruct(x)")
    probs = task.perceive(recon)
    k = task.num_classes
    check(all(abs(sum(probs[i * k:(i + 1) * k]) - 1.0) < 1e-5 for i in range(2)), "perceive rows sum to one")
    check(len(task.predict(x)) == 2, "predict returns one label per image")


def main():
    print(f"saic {saic.__version__}")
    pure_functions()
    if len(sys.argv) > 1:
        checkpoints(sys.argv[1])
    print("smoke test passed")


if __name__ == "__main__":
    main()
