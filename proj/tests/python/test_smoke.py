import math

import numpy as np
import pytest

import tpsalign


def test_metric_oracles():
    assert tpsalign.average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert tpsalign.inverse_negative_penalty([1, 0, 1]) == pytest.approx(
        2 / 3, abs=1e-12
    )
    with pytest.raises(tpsalign.ConfigError):
        tpsalign.average_precision([0, 0])


def test_loss_closed_forms():
    assert tpsalign.deformation_loss([math.pi / 4, -math.pi / 4]) == pytest.approx(
        math.pi / 4, abs=1e-12
    )
    masks = np.full((3, 5), 0.5)
    assert tpsalign.entropy_loss(masks) == pytest.approx(math.log(2), abs=1e-12)
    f = np.random.default_rng(0).uniform(0.5, 1.5, size=(4, 6))
    m = np.random.default_rng(1).uniform(0.1, 0.9, size=(4, 6))
    assert tpsalign.align_loss(m, f, f) == pytest.approx(0.0, abs=1e-12)


def test_rotation_warp_grid_identity():
    grid = tpsalign.rotation_warp_grid(control_points=9, h=4, w=4, theta=0.0)
    assert grid.shape == (16, 2)
    # zero rotation leaves the patch centres untouched
    xs = (np.arange(4) * 2 + 1) / 4 - 1
    expect = np.stack(np.meshgrid(xs, xs), axis=-1).reshape(16, 2)
    assert np.allclose(grid, expect, atol=1e-10)


def test_render_and_embed_roundtrip(tmp_path):
    img = tpsalign.render_sample(identity=2, view=1, index=0, image_h=24, image_w=12)
    assert img.shape == (24, 12)
    assert img.min() >= 0.0 and img.max() <= 1.0

    data = tmp_path / "data"
    n = tpsalign.generate_dataset(
        str(data), identities=6, samples_per_view=2, image_h=16, image_w=8, seed=3
    )
    assert n == 6 * 2 * 2
    assert (data / "manifest.csv").exists()

    out = tmp_path / "run"
    res = tpsalign.train(
        str(data),
        str(out),
        overrides=[
            "encoder.depth=2",
            "encoder.dim=16",
            "encoder.heads=2",
            "encoder.patch=4",
            "optim.batch_p=2",
            "optim.batch_k=2",
            "optim.epochs=1",
            "optim.warmup_epochs=0",
        ],
        max_steps=2,
    )
    assert res["steps_run"] == 2
    assert all(math.isfinite(r["total"]) for r in res["records"])

    scores = tpsalign.evaluate(res["checkpoint"], str(data), protocol="ALL")
    assert scores["protocol"] == "ALL"
    assert 0.0 <= scores["rank1"] <= 100.0
    assert scores["queries"] == 12  # 3 test identities x 4 samples


def test_evaluate_embeddings_chance_free_case():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]])
    m = tpsalign.evaluate_embeddings(emb, [7, 7, 8], [0, 0, 0], protocol="ALL")
    assert m["rank1"] == pytest.approx(100.0)
    assert m["skipped"] == 1
