"""Quick end-to-end check of the Python bindings."""
import json
import math
import os
import tempfile

import a2bis_py as a2


def main():
    a = a2.RBox(10.0, 10.0, 8.0, 4.0, 0.3)
    assert a2.gauss_distance(a, a) == 0.0
    assert abs(a2.rotated_iou(a, a) - 1.0) < 1e-9
    assert abs(a2.box_loss(a, a, 1.0)) < 1e-12
    b = a2.RBox(10.0, 10.0, 4.0, 8.0, 0.3 + math.pi / 2).canonicalize()
    assert abs(a2.rotated_iou(a, b) - 1.0) < 1e-9, b
    keep = a2.rotated_nms([a, b, a2.RBox(40.0, 40.0, 6.0, 3.0, 0.0)], [0.9, 0.8, 0.5], 0.3)
    assert keep == [0, 2], keep

    scenes = a2.synth(3, 7)
    image, ann = scenes[0]
    assert image.shape == (64, 64, 3)
    n_cls = 2
    tg = a2.build_targets(ann, n_cls)
    # background, classes, overlap
    assert tg["seg"].shape == (64, 64, n_cls + 2)

    # GT maps fed straight to the proposal stage recover every instance.
    pairs = []
    for image, ann in scenes:
        tg = a2.build_targets(ann, n_cls)
        dets = a2.propose(tg["skl"], tg["seg"], tg["box"])
        pairs.append((dets, ann))
    report = json.loads(a2.evaluate(pairs))
    assert report["map50"] == 1.0, report
    print("passthrough", {k: report[k] for k in ("map50", "mpq", "bpq")})

    net = a2.Net(seed=1)
    out = net.forward(scenes[0][0])
    assert out["skl"].shape == (64, 64, 1)
    assert all(0.0 <= v <= 1.0 for v in out["skl"].data())
    print("net params", net.num_params())

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "skl.a2bt")
        out["skl"].write(p)
        back = a2.Tensor.read(p)
        assert back.data() == out["skl"].data()
        assert os.path.getsize(p) == 20 + 4 * 64 * 64

    g = json.loads(a2.gradcheck(0))
    assert g["max_rel_error"] < 1e-4, g
    print("gradcheck", g["max_rel_error"])

    assert a2.cli(["boxdist", "--a", "0,0,4,2,0", "--b", "1,0,4,2,0"]) == 0
    assert a2.cli(["frobnicate"]) == 2
    print("ok")


if __name__ == "__main__":
    main()
