import csv
import math

import numpy as np
import pytest
import torch

from degforge import toyworld
from degforge.manifest import ManifestRecord
from degforge.restoration import (
    DuplicatePathError,
    Restorer,
    RestorerConfig,
    TrainConfig,
    decoder_conv_weight_count,
    epoch_means,
    load_restorer,
    lr_at,
    mix_datasets,
    parameter_count,
    restore,
    save_restorer,
    train_restorer,
    training_regimes,
    write_curve,
)
from degforge.restoration.model import _shift_mask, window_partition, window_reverse


def _rec(i, src="x", kept=True):
    return ManifestRecord(i, f"/c/{src}{i}.png", f"/g/{src}{i}.png", f"/c/{src}{i}.png", "haze", kept=kept)


def test_required_multiple_and_padding_message():
    m = Restorer()
    assert m.config.required_multiple == 32
    with pytest.raises(ValueError, match=r"pad by \(8, 0\) pixels to 32x32"):
        m(torch.rand(1, 3, 24, 32))


def test_output_shape_and_range():
    m = Restorer()
    out = m(torch.rand(2, 3, 32, 64))
    assert out.shape == (2, 3, 32, 64) and out.min() >= 0 and out.max() <= 1


def test_decoder_weight_counts_scale_with_kernel_area():
    w1 = decoder_conv_weight_count(Restorer(RestorerConfig(decoder_kernel=1)))
    w3 = decoder_conv_weight_count(Restorer(RestorerConfig(decoder_kernel=3)))
    assert w3 == 9 * w1
    total1 = parameter_count(Restorer(RestorerConfig(decoder_kernel=1)))
    total3 = parameter_count(Restorer(RestorerConfig(decoder_kernel=3)))
    assert total3 - total1 == 8 * w1


def test_bad_kernel_rejected():
    with pytest.raises(ValueError):
        RestorerConfig(decoder_kernel=5)


def test_window_partition_round_trip():
    x = torch.randn(2, 8, 12, 5)
    w = window_partition(x, 4)
    assert w.shape == (2 * 2 * 3, 16, 5)
    torch.testing.assert_close(window_reverse(w, 4, 8, 12), x)


def test_shift_mask_blocks_cross_region_pairs():
    mask = _shift_mask(8, 8, 4, 2)
    assert mask.shape[0] == 4
    assert (mask[0] == 0).all()  # top-left window lies inside one region
    assert (mask[-1] < 0).any()


def test_encoder_weights_hook():
    a, b = Restorer(), Restorer()
    missing, unexpected = b.load_encoder_weights(a.encoder.state_dict())
    assert missing == [] and unexpected == []
    for (_, pa), (_, pb) in zip(a.encoder.state_dict().items(), b.encoder.state_dict().items()):
        torch.testing.assert_close(pa, pb)


@pytest.mark.parametrize("step,expect", [(0, 0.0), (5, 1e-4), (10, 2e-4), (55, 1e-4), (100, 0.0)])
def test_lr_schedule_probe_points(step, expect):
    assert lr_at(step, 100, 10, 2e-4) == pytest.approx(expect, abs=1e-9)


def test_lr_schedule_is_cosine_after_warmup():
    for s in range(10, 101, 7):
        expect = 2e-4 * 0.5 * (1 + math.cos(math.pi * (s - 10) / 90))
        assert lr_at(s, 100, 10, 2e-4) == pytest.approx(expect, abs=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, warmup_epochs=2)


def test_mix_counts_and_regimes():
    existing = [_rec(i, "e") for i in range(3)]
    generated = [_rec(i, "g") for i in range(5)]
    rows, counts = mix_datasets(existing, generated)
    assert counts == {"existing": 3, "generated": 5, "total": 8}
    assert [r.source for r in rows] == ["existing"] * 3 + ["generated"] * 5
    reg = training_regimes(existing, generated)
    assert {k: len(v) for k, v in reg.items()} == {"existing": 3, "generated": 5, "combined": 8}


def test_mix_rejects_duplicate_paths():
    with pytest.raises(DuplicatePathError):
        mix_datasets([_rec(0, "a")], [_rec(0, "a")])


def _write_pairs(tmp_path, n):
    recs = []
    for i, p in enumerate(toyworld.make_corpus("haze", n, seed=0, size=32)):
        c, d = tmp_path / f"c{i}.png", tmp_path / f"d{i}.png"
        toyworld.save_png(c, p.clean)
        toyworld.save_png(d, p.degraded)
        recs.append(ManifestRecord(i, str(c), str(d), str(c), "haze", kept=i != 0))
    return recs


def test_training_runs_and_checkpoint_round_trips(tmp_path):
    recs = _write_pairs(tmp_path, 9)
    torch.manual_seed(0)
    m = Restorer()
    curve = train_restorer(m, recs, TrainConfig(epochs=3, batch_size=4, lr=1e-3, warmup_epochs=1), seed=0)
    assert len(curve) == 3 * 2  # 8 kept rows, batch 4
    assert curve[0].lr == 0.0
    means = epoch_means(curve)
    assert means[-1] < means[0]
    write_curve(tmp_path / "curve.csv", curve)
    rows = list(csv.reader(open(tmp_path / "curve.csv")))
    assert rows[0] == ["epoch", "step", "lr", "loss"] and len(rows) == 7

    path = save_restorer(m, tmp_path / "ckpt")
    back = load_restorer(path)
    x = toyworld.load_png(recs[1].gen_path)
    np.testing.assert_array_equal(restore(m, x), restore(back, x))


def test_training_reports_missing_files(tmp_path):
    recs = _write_pairs(tmp_path, 2)
    (tmp_path / "d1.png").unlink()
    with pytest.raises(FileNotFoundError, match="d1.png"):
        train_restorer(Restorer(), recs, TrainConfig(epochs=1))


def test_training_needs_kept_rows():
    with pytest.raises(ValueError):
        train_restorer(Restorer(), [_rec(0, kept=False)], TrainConfig(epochs=1))
