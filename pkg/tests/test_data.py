import numpy as np
import pytest
from scipy.spatial.distance import pdist

from mirolab.autodiff import ContractError
from mirolab.data import (
    dump_suite,
    gen_rotated_moons,
    gen_spurious_blobs,
    leave_one_out,
    load_suite_csv,
    moons_base,
    read_sidecar,
    rotate,
    sample_batch,
    suite_from_spec,
)


def test_angle_zero_is_base_set():
    suite = gen_rotated_moons([0, 30], 101, 0.1, seed=4)
    x, y = moons_base(101, 0.1, [4, 0])
    assert np.array_equal(suite.full(0)[0], x)
    assert np.array_equal(suite.full(0)[1], y)


def test_rotation_by_90_maps_basis_vector():
    assert np.array_equal(rotate(np.array([[1.0, 0.0]]), 90), [[0.0, 1.0]])


@pytest.mark.parametrize("n", [100, 101])
def test_moons_class_balance(n):
    suite = gen_rotated_moons([0, 15, 30], n, 0.1, seed=0)
    for d in suite.domains:
        counts = sorted(np.bincount(suite.full(d)[1]))
        assert counts == [n // 2, n - n // 2]


def test_rotation_preserves_distances():
    x, _ = moons_base(80, 0.1, [1, 0])
    for angle in (15, 33.3, 45, 170):
        assert np.max(np.abs(pdist(x) - pdist(rotate(x, angle)))) < 1e-10


def test_generators_are_pure():
    a = gen_rotated_moons([0, 15, 30, 45], 50, 0.1, seed=9)
    b = gen_rotated_moons([0, 15, 30, 45], 50, 0.1, seed=9)
    for d in a.domains:
        assert np.array_equal(a.full(d)[0], b.full(d)[0])
    s1 = gen_spurious_blobs([1, 2, 3], 60, seed=2)
    s2 = gen_spurious_blobs([1, 2, 3], 60, seed=2)
    for d in s1.domains:
        assert np.array_equal(s1.full(d)[0], s2.full(d)[0])
        assert np.array_equal(s1.splits[d][1], s2.splits[d][1])


def test_moons_need_two_domains():
    with pytest.raises(ContractError):
        gen_rotated_moons([0], 10)


def point_biserial(x, y):
    return np.corrcoef(x, y)[0, 1]


def test_spurious_zero_strength_is_uncorrelated():
    suite = gen_spurious_blobs([0.0, 0.0], 2000, seed=1)
    for d in suite.domains:
        x, y = suite.full(d)
        assert abs(point_biserial(x[:, -1], y)) < 0.05


def test_spurious_strong_is_correlated():
    suite = gen_spurious_blobs([5.0, 5.0], 2000, seed=1, spurious_noise=0.1)
    for d in suite.domains:
        x, y = suite.full(d)
        assert abs(point_biserial(x[:, -1], y)) > 0.95


def test_spurious_target_flip():
    suite = gen_spurious_blobs([3.0, 3.0, 3.0], 500, seed=0, spurious_noise=0.1)
    held = suite.for_target(1)
    x, y = held.full(1)
    assert point_biserial(x[:, -1], y) < -0.95
    for d in (0, 2):
        assert np.array_equal(held.full(d)[0], suite.full(d)[0])
    assert np.array_equal(held.full(1)[0][:, :-1], suite.full(1)[0][:, :-1])


def test_leave_one_out_configurations():
    suite = gen_rotated_moons([0, 15, 30, 45], 40, 0.1)
    configs = list(leave_one_out(suite))
    assert len(configs) == 4
    assert all(len(src) == 3 for src, _ in configs)
    assert sorted(t for _, t in configs) == suite.domains
    for src, t in configs:
        assert t not in src


def test_leave_one_out_needs_two():
    suite = gen_rotated_moons([0, 15], 40, 0.1)
    with pytest.raises(ContractError):
        list(leave_one_out(suite.subset([0])))


def test_splits_disjoint_exhaustive_stratified():
    suite = gen_spurious_blobs([1, 1, 1], 203, seed=5, n_classes=3)
    for d in suite.domains:
        tr, va = suite.splits[d]
        assert not set(tr) & set(va)
        assert sorted(np.concatenate([tr, va])) == list(range(203))
        y = suite.full(d)[1]
        for c in range(3):
            n_c = np.sum(y == c)
            assert abs(np.sum(y[va] == c) - 0.2 * n_c) <= 1


def test_sample_batch_full_domain_is_permutation():
    suite = gen_rotated_moons([0, 15], 50, 0.1)
    n = len(suite.train(0)[1])
    batch = sample_batch(suite, [0], n, seed=0, step=0)
    assert sorted(map(tuple, batch.x)) == sorted(map(tuple, suite.train(0)[0]))


def test_sample_batch_size_and_determinism():
    suite = gen_rotated_moons([0, 15, 30], 100, 0.1)
    b1 = sample_batch(suite, [0, 2], 16, seed=3, step=7)
    b2 = sample_batch(suite, [0, 2], 16, seed=3, step=7)
    assert len(b1) == 32 and np.array_equal(b1.x, b2.x)
    assert np.array_equal(np.bincount(b1.domains, minlength=3), [16, 0, 16])


def test_sample_batch_epoch_coverage():
    suite = gen_rotated_moons([0, 15], 50, 0.1)
    n = len(suite.train(0)[1])
    N = 7
    steps = (10 * n) // N
    counts = np.zeros(n, dtype=int)
    x_train = suite.train(0)[0]
    lookup = {tuple(r): i for i, r in enumerate(x_train)}
    for s in range(steps):
        for r in sample_batch(suite, [0], N, seed=1, step=s).x:
            counts[lookup[tuple(r)]] += 1
    assert counts.max() - counts.min() <= 1


def test_sample_batch_insufficient():
    suite = gen_rotated_moons([0, 15], 20, 0.1)
    with pytest.raises(ContractError):
        sample_batch(suite, [0], 100, 0, 0)


def test_dump_and_regenerate(tmp_path):
    suite = gen_spurious_blobs([1.5, -2.0, 0.5], 30, seed=3)
    path = tmp_path / "d.csv"
    sidecar = dump_suite(suite, path)
    text = path.read_text()
    assert text.splitlines()[0] == "domain,label,x1,x2,x3,x4,x5"
    again = suite_from_spec(read_sidecar(sidecar))
    for d in suite.domains:
        assert np.array_equal(again.full(d)[0], suite.full(d)[0])
    rows = load_suite_csv(path)
    assert [r[0] for r in rows] == suite.domains
    assert np.array_equal(rows[1][1], suite.full(1)[0])
    path2 = tmp_path / "e.csv"
    dump_suite(again, path2)
    assert path2.read_bytes() == path.read_bytes()
