import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wifiloc.dataset import RSS_MAX, RSS_MIN, Dataset, RssSample
from wifiloc.encoder import (
    RAW_MISSING,
    ApDirectory,
    FingerprintImage,
    build_directory,
    encode_dataset,
    encode_raw,
    encode_sample,
    export_image,
    load_image,
    stack_images,
)


def train_set(*scans):
    pos = {k: (float(k), 0.0) for k in range(len(scans))}
    return Dataset(tuple(RssSample(r, k, pos[k]) for k, r in enumerate(scans)), pos, "train")


def test_first_appearance_order():
    d = build_directory(train_set({"B": -50, "A": -60}, {"A": -50, "C": -70}))
    assert d.order == ("B", "A", "C")
    assert (d.n_ap, d.side) == (3, 2)


@pytest.mark.parametrize("n, side", [(1, 1), (2, 2), (4, 2), (5, 3), (9, 3), (10, 4), (113, 11), (121, 11), (122, 12)])
def test_side(n, side):
    assert ApDirectory([f"ap{i}" for i in range(n)]).side == side


@given(st.integers(1, 5000))
def test_side_minimal(n):
    s = ApDirectory([str(i) for i in range(n)]).side
    assert (s - 1) ** 2 < n <= s * s
    assert s == math.ceil(math.sqrt(n))


def test_directory_rejects_bad_input():
    with pytest.raises(ValueError):
        build_directory(Dataset((), {}, "train"))
    with pytest.raises(ValueError):
        ApDirectory(["A", "A"])
    with pytest.raises(ValueError):
        build_directory(Dataset((RssSample({"A": -50}, 0, (0.0, 0.0)),), {0: (0.0, 0.0)}, "test-known"))


def test_layout_row_major():
    d = ApDirectory([f"ap{i}" for i in range(7)])
    assert [d.pixel_of(f"ap{i}") for i in range(7)] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0)]
    # neighbours in order are horizontal neighbours except at row ends
    for k in range(6):
        (r0, c0), (r1, c1) = d.pixel_of(f"ap{k}"), d.pixel_of(f"ap{k + 1}")
        assert (r1, c1) == ((r0, c0 + 1) if c0 < d.side - 1 else (r0 + 1, 0))


def test_bounds_of_encoding():
    d = ApDirectory(["A"])
    assert encode_sample({"A": -99}, d).pixels.tolist() == [[101]]
    assert encode_sample({"A": -30}, d).pixels.tolist() == [[170]]


def test_empty_scan_encodes_to_zero():
    d = ApDirectory(["A", "B", "C"])
    assert not encode_sample({}, d).pixels.any()


def test_unknown_ap_dropped_and_unseen_zero():
    img = encode_sample({"A": -50, "Z": -40}, ApDirectory(["A", "B"]))
    assert img.pixels.tolist() == [[150, 0], [0, 0]]
    assert img.pixels.dtype == np.uint8


def test_label_copied():
    s = RssSample({"A": -50}, 7, (1.0, 1.0))
    assert encode_sample(s, ApDirectory(["A"])).label == 7


def test_encode_dataset_elementwise(rng):
    aps = [f"ap{i}" for i in range(13)]
    d = ApDirectory(aps)
    samples = []
    for i in range(20):
        chosen = rng.choice(aps, size=rng.integers(1, 13), replace=False)
        samples.append(RssSample({a: int(rng.integers(RSS_MIN, RSS_MAX + 1)) for a in chosen}))
    out = encode_dataset(samples, d)
    assert out == [encode_sample(s, d) for s in samples]
    assert encode_dataset([], d) == []
    assert encode_dataset(samples[:1], d) == [encode_sample(samples[0], d)]


@given(
    st.integers(1, 60).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.dictionaries(st.integers(0, n + 5), st.integers(RSS_MIN, RSS_MAX), max_size=n + 5),
        )
    )
)
def test_pixel_range_property(case):
    n, raw = case
    d = ApDirectory([f"ap{i}" for i in range(n)])
    px = encode_sample({f"ap{k}": v for k, v in raw.items()}, d).pixels.ravel()
    nonzero = px[px > 0]
    assert ((nonzero >= 101) & (nonzero <= 170)).all()
    assert not px[n:].any()  # padding
    for k, v in raw.items():
        if k < n:
            assert px[k] == v + 200


def test_raw_vector():
    d = ApDirectory(["A", "B", "C"])
    v = encode_raw(RssSample({"C": -60, "A": -45, "Q": -30}), d)
    assert v.tolist() == [-45, RAW_MISSING, -60]


def test_stack_images():
    imgs = [FingerprintImage(np.full((2, 2), 101, np.uint8), 3), FingerprintImage(np.zeros((2, 2), np.uint8))]
    x, y = stack_images(imgs)
    assert x.shape == (2, 2, 2) and y.tolist() == [3, -1]


def test_directory_json(tmp_path):
    d = ApDirectory(["x", "y", "z"])
    assert d.to_json() == {"order": ["x", "y", "z"], "side": 2}
    d.save(tmp_path / "dir.json")
    assert ApDirectory.load(tmp_path / "dir.json") == d
    with pytest.raises(ValueError):
        ApDirectory.from_json({"order": ["x"], "side": 3})


def test_pgm_zero_image(tmp_path):
    export_image(FingerprintImage(np.zeros((2, 2), np.uint8)), tmp_path / "z.pgm")
    assert (tmp_path / "z.pgm").read_text().split() == ["P2", "2", "2", "255", "0", "0", "0", "0"]


def test_pgm_values_row_major(tmp_path):
    export_image(FingerprintImage(np.array([[101, 170], [0, 0]], np.uint8)), tmp_path / "a.pgm")
    assert (tmp_path / "a.pgm").read_text().split()[4:] == ["101", "170", "0", "0"]


@pytest.mark.parametrize("binary", [False, True])
@given(st.integers(1, 12), st.data())
def test_pgm_round_trip(tmp_path_factory, binary, side, data):
    vals = data.draw(st.lists(st.sampled_from([0, 9, 10, 13, 32] + list(range(101, 171))),
                              min_size=side * side, max_size=side * side))
    img = FingerprintImage(np.array(vals, np.uint8).reshape(side, side))
    p = tmp_path_factory.mktemp("pgm") / "i.pgm"
    export_image(img, p, binary=binary)
    back = load_image(p)
    assert np.array_equal(back.pixels, img.pixels) and back.pixels.dtype == np.uint8
