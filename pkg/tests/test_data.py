import numpy as np
import pytest

from ctxdiff.data import (default_means, generate, read_dataset, samples_to_csv, scatter_svg,
                          write_dataset)


def test_empty_dataset_is_header_only(tmp_path):
    ds = generate({"generator": "toy-gaussian", "n": 0, "n_classes": 2, "dim": 2})
    text = write_dataset(tmp_path / "d.csv", ds)
    assert text == "x_1,x_2,class\n"
    back = read_dataset(tmp_path / "d.csv")
    assert back.x0.shape == (0, 2)


@pytest.mark.parametrize("gen", ["toy-gaussian", "two-moons", "swiss-roll"])
def test_same_spec_same_bytes(tmp_path, gen):
    spec = {"generator": gen, "n": 300, "seed": 5}
    a = write_dataset(tmp_path / "a.csv", generate(spec))
    b = write_dataset(tmp_path / "b.csv", generate(spec))
    assert a == b
    assert generate(spec).fingerprint() == generate(spec).fingerprint()


def test_round_trip_is_exact(tmp_path):
    ds = generate({"n": 50, "seed": 1})
    write_dataset(tmp_path / "d.csv", ds)
    back = read_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.x0, ds.x0)
    np.testing.assert_array_equal(back.classes, ds.classes)


def test_class_means_within_sampling_tolerance():
    ds = generate({"generator": "toy-gaussian", "n": 10_000, "n_classes": 2, "dim": 2,
                   "sigma": 0.5, "seed": 0})
    np.testing.assert_array_equal(default_means(2), [[-2.0, 0.0], [2.0, 0.0]])
    assert np.bincount(ds.classes).tolist() == [5000, 5000]
    err = np.abs(ds.class_means() - default_means(2))
    assert err.max() < 4 * 0.5 / np.sqrt(5000)


def test_unknown_generator_and_negative_count():
    with pytest.raises(ValueError):
        generate({"generator": "spiral"})
    with pytest.raises(ValueError):
        generate({"n": -1})


def test_read_rejects_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b,label\n1,2,0\n")
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "bad.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "empty.csv")


def test_sample_csv_columns():
    text = samples_to_csv(np.array([[0.5, -1.0]]), [1], seed=3, mode="ddim")
    assert text.splitlines() == ["x_1,x_2,class,seed,mode", "0.5,-1.0,1,3,ddim"]
    assert samples_to_csv(np.zeros((0, 2)), [], 0, "ddpm") == "x_1,x_2,class,seed,mode\n"


def test_scatter_svg():
    svg = scatter_svg(np.array([[0.0, 0.0], [1.0, 2.0]]), [0, 1])
    assert svg.startswith("<svg") and svg.count("<circle") == 2
    assert scatter_svg(np.zeros((0, 2)), []).count("<circle") == 0
