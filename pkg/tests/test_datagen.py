import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualfair.datagen import (DataSpec, corr, generate, load_csv, save_csv, shift_domain, split,
                              subsample, unshift_domain)
from dualfair.errors import ParseError, SchemaError, SpecError


def test_directions_orthonormal():
    t, s = DataSpec(world_seed=3).directions()
    Q = np.vstack([t, s])
    assert np.allclose(Q @ Q.T, np.eye(4), atol=1e-12)


def test_generation_is_pure():
    a, b = generate(DataSpec(n=50, seed=4)), generate(DataSpec(n=50, seed=4))
    assert np.array_equal(a.patches, b.patches) and np.array_equal(a.a, b.a)
    assert not np.array_equal(a.patches, generate(DataSpec(n=50, seed=5)).patches)


@pytest.mark.parametrize("rho", [0.5, 0.9, 1.0, 0.0])
def test_agreement_rate(rho):
    d = generate(DataSpec(n=20000, rho=rho, seed=1))
    assert abs(np.mean(d.a == d.y) - rho) < 0.015


def test_rho_half_means_independent():
    d = generate(DataSpec(n=20000, rho=0.5, seed=2))
    assert abs(corr(d.y, d.a)) < 0.03


def test_noise_free_patch_is_signal_sum():
    spec = DataSpec(n=10, noise=0.0, target_scale=2.0, sensitive_scale=0.5, seed=0)
    d = generate(spec)
    t, s = spec.directions()
    for i in range(10):
        want = 2.0 * t[d.y[i]] + 0.5 * s[d.a[i]]
        assert np.allclose(d.patches[i], want[None, :], atol=1e-15)


def test_shift_is_rigid_plus_offset_and_invertible():
    spec = DataSpec(n=20, seed=1)
    d = generate(spec)
    R, off = spec.shift_transform()
    assert np.allclose(R @ R.T, np.eye(spec.d_patch), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    sh = shift_domain(d, spec)
    assert np.all(sh.domain == 1)
    assert np.allclose(unshift_domain(sh, spec).patches, d.patches, atol=1e-12)
    assert np.array_equal(sh.y, d.y) and np.array_equal(sh.a, d.a)


def test_zero_shift_is_identity():
    spec = DataSpec(n=5, rotation_deg=0.0, offset=0.0)
    d = generate(spec)
    assert np.allclose(shift_domain(d, spec).patches, d.patches, atol=1e-15)


def test_split_and_subsample():
    d = generate(DataSpec(n=100, seed=0))
    tr, va, te = split(d, seed=3)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert sorted(np.concatenate([tr.ids, va.ids, te.ids])) == list(range(100))
    s1, s2 = subsample(tr, 0.2, seed=1), subsample(tr, 0.2, seed=1)
    assert len(s1) == 14 and np.array_equal(s1.ids, s2.ids)
    assert subsample(tr, 1.0) is tr
    with pytest.raises(SpecError):
        subsample(tr, 0.0)


@given(st.floats(-1, 2), st.floats(-1, 2))
@settings(max_examples=30, deadline=None)
def test_spec_validation(rho, p_y):
    spec = DataSpec(n=3, rho=rho, p_y=p_y)
    if 0 <= rho <= 1 and 0 <= p_y <= 1:
        spec.validate()
    else:
        with pytest.raises(SpecError):
            spec.validate()


def test_spec_errors():
    with pytest.raises(SpecError):
        DataSpec(d_patch=3).validate()
    with pytest.raises(SpecError):
        DataSpec(target_dirs=np.zeros((2, 8))).validate()
    with pytest.raises(SpecError):
        DataSpec(noise=-1).validate()


def test_csv_roundtrip_bitwise(tmp_path):
    d = generate(DataSpec(n=7, seed=8))
    p = tmp_path / "d.csv"
    save_csv(d, p)
    header = p.read_text().splitlines()[0].split(",")
    assert header[:5] == ["id", "y", "a", "domain", "p0"] and header[-1] == "p127"
    back = load_csv(p)
    assert np.array_equal(back.patches, d.patches) and np.array_equal(back.ids, d.ids)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,y,a,domain,q0\n")
    with pytest.raises(SchemaError):
        load_csv(p, n_patches=1)
    p.write_text("id,y,a,domain,p0,p1\n0,1,0,0,0.5,0.1\n1,1,0,0,zz,0.2\n")
    with pytest.raises(ParseError, match="line 3"):
        load_csv(p, n_patches=1)
    p.write_text("")
    with pytest.raises(SchemaError):
        load_csv(p)
