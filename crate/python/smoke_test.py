"""Smoke test for the align_criterion extension module.

Run after installing the wheel (see README) or with the built extension on
PYTHONPATH:  python python/smoke_test.py
"""

import json
import math

import align_criterion as ac


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    a = ac.Box(0.5, 0.5, 0.2, 0.2)
    b = ac.Box(0.55, 0.5, 0.2, 0.2)
    assert close(ac.iou(a, b), 0.6)
    assert ac.giou(a, b) <= ac.iou(a, b)
    assert close(ac.iou(a, a), 1.0)
    try:
        ac.Box(0.5, 0.5, 0.0, 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("zero-width box accepted")

    assert close(ac.quality(0.5, 0.8, 0.25), 0.5 ** 0.25 * 0.8 ** 0.75)
    assert close(ac.prime_weights([0.9, 0.5], 1.5)[1], math.exp(-1 / 1.5))

    cost = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]
    fast = ac.assign(cost)
    slow = ac.assign(cost, brute_force=True)
    assert fast["total_cost"] == slow["total_cost"] == 5.0

    scene = ac.generate_scene(2, seed=7, n_classes=3)
    assert len(scene) == 2
    assert ac.Scene.from_json(scene.to_json()).to_json() == scene.to_json()

    preds_json = json.dumps({"layers": [[
        {"scores": [0.7, 0.2, 0.1], "box": box.to_list()} for _, box in scene.objects()
    ] + [{"scores": [0.1, 0.1, 0.1], "box": [0.5, 0.5, 0.1, 0.1]}] * 4] * 2})
    preds = ac.Predictions.from_json(preds_json, scene.classes)
    assert len(preds) == 2

    m = ac.match_layer(preds, scene, k=3, layer=0)
    assert sorted(p["gt"] for p in m["pairs"]) == [0, 0, 0, 1, 1, 1]

    report = ac.total_loss(preds, scene, variant="ia-bce", k=3)
    assert math.isfinite(report["total"]) and len(report["layers"]) == 2
    assert report["layers"][0]["matching"] == "many-to-one"
    focal = ac.total_loss(preds, scene, variant="focal", k=3)
    assert focal["total"] != report["total"]

    for variant in ["ia-bce", "focal", "qfl:1", "vfl", "weighting:4"]:
        check = ac.gradcheck(variant, seed=3)
        assert check["pass"], (variant, check)

    assert 0.0 <= ac.br_recall(preds, scene, m=1) <= 1.0
    assert close(ac.pearson([0.1, 0.5, 0.9], [0.2, 0.4, 0.9]), 0.970725343394151, 1e-12)

    records, final = ac.train(ac.generate_scene(1, seed=5), steps=300, n_queries=5)
    assert len(records) == 300 and records[-1]["total"] < records[0]["total"]
    assert len(final.confidences()) == 5

    print("smoke test passed")


if __name__ == "__main__":
    main()
