import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markboard import autograd as ag
from markboard.autograd import DimensionError
from markboard.distribution import (
    DuplicateUser,
    LoadError,
    MintRecord,
    Signature,
    SignatureRegistry,
    SignatureSpaceExhausted,
    UserModel,
    deserialize_artifact,
    dumps,
    load_pair,
    load_user_artifact,
    loads,
    mint,
    mint_batch,
    obfuscate,
    obfuscation_matrix,
    registry_lock,
    sample_signature,
    serialize_artifact,
)
from markboard.model import branch_delta
from markboard.optim import make_rng

STAMP = "2024-01-01T00:00:00Z"


# --- signatures -----------------------------------------------------------------------

def test_signature_basics():
    s = Signature.from_string("0110")
    assert str(s) == "0110" and len(s) == 4 and s.distributable
    assert not Signature.from_string("0000").distributable
    assert not Signature.from_string("111").distributable
    with pytest.raises(ValueError):
        Signature((0, 2))
    with pytest.raises(ValueError):
        Signature(())


def test_sample_signature_fills_the_space_then_exhausts():
    rng = make_rng(0)
    taken = set()
    for _ in range(2 ** 4 - 2):
        s = sample_signature(4, taken, rng)
        assert s.distributable and str(s) not in taken
        taken.add(str(s))
    with pytest.raises(SignatureSpaceExhausted):
        sample_signature(4, taken, rng)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_sample_signature_is_distributable(n, seed):
    s = sample_signature(n, [], make_rng(seed))
    assert len(s) == n and s.distributable


# --- obfuscation -------------------------------------------------------------------------

def test_obfuscation_matrix_is_full_rank_and_scaled(rng):
    w0 = rng.normal(0, 0.05, size=(20, 30)).astype(np.float32)
    for scale in (0.5, 1.0, 8.0):
        psi = obfuscation_matrix(w0, 3, scale)
        assert psi.shape == w0.shape
        assert np.linalg.matrix_rank(psi) == 20
        assert 0.5 <= np.linalg.norm(psi) / (scale * np.linalg.norm(w0)) <= 2.0
    np.testing.assert_array_equal(obfuscation_matrix(w0, 3), obfuscation_matrix(w0, 3))
    assert not np.array_equal(obfuscation_matrix(w0, 3), obfuscation_matrix(w0, 4))
    with pytest.raises(ValueError):
        obfuscation_matrix(w0, 3, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_obfuscation_preserves_every_convex_mix(seed, n):
    r = np.random.default_rng(seed)
    w0 = r.normal(size=(6, 4))
    deltas = [r.normal(size=(6, 4)) for _ in range(n)]
    psi = r.normal(size=(6, 4)) * 3
    w1, d1 = obfuscate(w0, deltas, psi)
    omega = r.dirichlet(np.ones(n))
    before = w0 + sum(o * d for o, d in zip(omega, deltas))
    after = w1 + sum(o * d for o, d in zip(omega, d1))
    np.testing.assert_allclose(after, before, atol=1e-9)


def test_obfuscate_with_zero_is_identity(rng):
    w0, d = rng.normal(size=(3, 2)), [rng.normal(size=(3, 2))]
    w1, d1 = obfuscate(w0, d, np.zeros((3, 2)))
    np.testing.assert_array_equal(w1, w0)
    np.testing.assert_array_equal(d1[0], d[0])
    with pytest.raises(DimensionError):
        obfuscate(w0, d, np.zeros((2, 3)))


# --- minting -------------------------------------------------------------------------------

def test_mint_without_psi_at_all_ones_reproduces_active(tiny_pair, tiny_data):
    art = mint(tiny_pair, Signature((1,) * tiny_pair.n), None, allow_degenerate=True, minted_at=STAMP)
    x = tiny_data.x_test[:200]
    np.testing.assert_allclose(art.model().logits_np(x), tiny_pair.active.logits_np(x), atol=1e-4)
    art0 = mint(tiny_pair, Signature((0,) * tiny_pair.n), None, allow_degenerate=True, minted_at=STAMP)
    np.testing.assert_allclose(art0.model().logits_np(x), tiny_pair.inactive.logits_np(x), atol=1e-4)


def test_mint_rejects_reserved_and_wrong_length(tiny_pair):
    with pytest.raises(ValueError):
        mint(tiny_pair, Signature((0,) * tiny_pair.n), 1)
    with pytest.raises(ValueError):
        mint(tiny_pair, Signature((0, 1)), 1)


def test_mint_selects_branches_by_signature(tiny_pair):
    sig = Signature.from_string("0110")
    t = mint(tiny_pair, sig, None, minted_at=STAMP).tensors
    for i, bit in enumerate(sig.bits):
        src = (tiny_pair.active if bit else tiny_pair.inactive).loras[0]
        np.testing.assert_array_equal(t[f"lora.0.delta.{i}"], branch_delta(src, i).astype(np.float32))


def test_obfuscated_mint_is_logit_equivalent(tiny_pair, tiny_data):
    sig = Signature.from_string("1010")
    plain = mint(tiny_pair, sig, None, minted_at=STAMP).model()
    obf_art = mint(tiny_pair, sig, 11, minted_at=STAMP)
    obf = obf_art.model()
    x = tiny_data.x_test[:300]
    a, b = plain.logits_np(x), obf.logits_np(x)
    assert np.max(np.abs(a - b)) / np.max(np.abs(a)) < 1e-4
    assert np.mean(a.argmax(1) == b.argmax(1)) > 0.995
    # every distributed delta is dense and full rank, and W0 no longer matches the pair
    for i in range(tiny_pair.n):
        d = obf_art.tensors[f"lora.0.delta.{i}"]
        assert np.linalg.matrix_rank(d) == min(d.shape)
    assert not np.allclose(obf_art.tensors["layers.0.weight"], tiny_pair.inactive.layers[0].weight.data)


def test_user_model_forward_paths_agree(tiny_pair, tiny_data):
    m = mint(tiny_pair, Signature.from_string("1100"), 5, minted_at=STAMP).model()
    x = tiny_data.x_test[:40]
    np.testing.assert_allclose(m.forward(x).data, m.logits_np(x), rtol=1e-4, atol=1e-4)
    np.testing.assert_allclose(m.forward(x[0]).data, m.logits_np(x[0]), rtol=1e-4, atol=1e-4)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, 7)))


def test_mint_computes_no_gradients(tiny_pair):
    before = ag.stats["backward_calls"]
    mint(tiny_pair, Signature.from_string("0101"), 2, minted_at=STAMP)
    assert ag.stats["backward_calls"] == before


def test_mint_is_deterministic_given_seed_and_time(tiny_pair):
    a = mint(tiny_pair, Signature.from_string("0011"), 9, minted_at=STAMP)
    b = mint(tiny_pair, Signature.from_string("0011"), 9, minted_at=STAMP)
    assert dumps(a) == dumps(b)
    c = mint(tiny_pair, Signature.from_string("0011"), 10, minted_at=STAMP)
    assert a.checksum() != c.checksum()


def test_user_artifact_carries_no_signature_or_pair_tensors(tiny_pair):
    sig = Signature.from_string("0110")
    text = dumps(mint(tiny_pair, sig, 4, minted_at=STAMP)).decode()
    manifest = json.loads(text)
    names = {t["name"] for t in manifest["tensors"]}
    assert not any(".B." in n or "Bwm" in n or ".A" in n or n.startswith("probe") for n in names)
    meta = json.dumps({k: v for k, v in manifest.items() if k != "tensors"})
    assert "signature" not in meta and "psi" not in meta and "0110" not in meta


# --- serialization ------------------------------------------------------------------------

def test_user_artifact_round_trip_is_byte_identical(tiny_pair, tmp_path):
    art = mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP)
    p = tmp_path / "u.mbu"
    checksum = serialize_artifact(art, p)
    back = deserialize_artifact(p)
    assert dumps(back) == p.read_bytes()
    assert back.checksum() == checksum == art.checksum()
    for k, v in art.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)


def test_pair_round_trip(tiny_pair, tiny_data, tmp_path):
    p = tmp_path / "pair.mbp"
    serialize_artifact(tiny_pair, p)
    back = load_pair(p)
    assert dumps(back) == p.read_bytes()
    x = tiny_data.x_test[:50]
    np.testing.assert_array_equal(back.active.logits_np(x), tiny_pair.active.logits_np(x))
    np.testing.assert_array_equal(back.inactive.logits_np(x), tiny_pair.inactive.logits_np(x))
    assert [t.to_dict() for t in back.triggers] == [t.to_dict() for t in tiny_pair.triggers]
    with pytest.raises(LoadError):
        load_user_artifact(p)


def test_flipped_byte_fails_checksum(tiny_pair):
    data = bytearray(dumps(mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP)))
    pos = data.index(b'"data":"') + 20
    data[pos] = ord("A") if data[pos] != ord("A") else ord("B")
    with pytest.raises(LoadError, match="checksum"):
        loads(bytes(data))


def test_truncated_and_garbage_files(tiny_pair, tmp_path):
    data = dumps(mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP))
    with pytest.raises(LoadError, match="truncated"):
        loads(data[: len(data) // 2])
    with pytest.raises(LoadError):
        loads(b"[1, 2]")
    with pytest.raises(LoadError):
        deserialize_artifact(tmp_path / "missing.mbu")


def test_unknown_version_rejected(tiny_pair):
    manifest = json.loads(dumps(mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP)))
    manifest["format_version"] = 99
    with pytest.raises(LoadError, match="format_version"):
        loads(json.dumps(manifest).encode())


def test_expected_n_mismatch(tiny_pair, tmp_path):
    p = tmp_path / "u.mbu"
    serialize_artifact(mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP), p)
    assert load_user_artifact(p, expected_n=4).n == 4
    with pytest.raises(LoadError, match="n mismatch"):
        load_user_artifact(p, expected_n=10)


def test_user_model_tensor_table_round_trip(tiny_pair):
    art = mint(tiny_pair, Signature.from_string("1001"), 3, minted_at=STAMP)
    m = UserModel(art.topology, art.tensors)
    assert m.tensors().keys() == art.tensors.keys()
    with pytest.raises(DimensionError):
        UserModel(art.topology, {**art.tensors, "layers.1.bias": np.zeros(3)})


# --- registry and batches ---------------------------------------------------------------

def test_registry_add_save_load(tmp_path):
    reg = SignatureRegistry(4, path=tmp_path / "r.json")
    reg.add(MintRecord("alice", Signature.from_string("0110"), STAMP, 1, "ab"))
    with pytest.raises(DuplicateUser):
        reg.add(MintRecord("alice", Signature.from_string("0011"), STAMP, 2, "cd"))
    with pytest.raises(ValueError):
        reg.add(MintRecord("bob", Signature.from_string("0110"), STAMP, 2, "cd"))
    with pytest.raises(ValueError):
        reg.add(MintRecord("bob", Signature.from_string("011"), STAMP, 2, "cd"))
    reg.save()
    back = SignatureRegistry.load(tmp_path / "r.json")
    assert back.signatures() == reg.signatures()
    assert SignatureRegistry.open(tmp_path / "r.json", 4).n == 4
    with pytest.raises(LoadError):
        SignatureRegistry.open(tmp_path / "r.json", 5)
    assert len(SignatureRegistry.open(tmp_path / "new.json", 4)) == 0


def test_registry_lock_is_reentrant_per_call(tmp_path):
    with registry_lock(tmp_path / "r.json"):
        pass
    with registry_lock(tmp_path / "r.json"):
        assert (tmp_path / "r.json.lock").exists()


def test_mint_batch_unique_and_all_or_nothing(tiny_pair):
    reg = SignatureRegistry(tiny_pair.n)
    assert mint_batch(tiny_pair, reg, [], make_rng(0)) == []
    out = mint_batch(tiny_pair, reg, ["u1", "u2", "u3"], make_rng(0), minted_at=STAMP)
    assert len(reg) == 3
    sigs = [str(r.signature) for r, _ in out]
    assert len(set(sigs)) == 3
    for rec, art in out:
        assert rec.artifact_checksum == art.checksum()
    with pytest.raises(DuplicateUser):
        mint_batch(tiny_pair, reg, ["u4", "u1"], make_rng(1))
    with pytest.raises(DuplicateUser):
        mint_batch(tiny_pair, reg, ["u5", "u5"], make_rng(1))
    assert len(reg) == 3
    # 2^4 - 2 = 14 signatures exist; asking for 12 more exhausts the space mid-batch
    with pytest.raises(SignatureSpaceExhausted):
        mint_batch(tiny_pair, reg, [f"v{i}" for i in range(12)], make_rng(2))
    assert len(reg) == 3


def test_minted_models_extract_their_signature(tiny_pair):
    from markboard.verification import TriggerBank, extract_signature
    bank = TriggerBank.from_pair(tiny_pair)
    reg = SignatureRegistry(tiny_pair.n)
    for rec, art in mint_batch(tiny_pair, reg, ["a", "b", "c", "d"], make_rng(5), minted_at=STAMP):
        assert extract_signature(art.model().logits_np, bank) == rec.signature.bits


def test_two_bit_signature_space():
    draws = {str(sample_signature(2, [], make_rng(s))) for s in range(40)}
    assert draws == {"01", "10"}
    with pytest.raises(SignatureSpaceExhausted):
        sample_signature(2, ["01", "10"], make_rng(0))


def test_thousand_ten_bit_draws_are_distinct():
    rng, taken = make_rng(0), set()
    for _ in range(1000):
        s = str(sample_signature(10, taken, rng))
        assert s not in taken and s not in ("0" * 10, "1" * 10)
        taken.add(s)


def test_trigger_fires_iff_bit_set(tiny_pair):
    from markboard.verification import TriggerBank, probe_rates
    bank = TriggerBank.from_pair(tiny_pair)
    for sig in ("1010", "0101", "1000"):
        rates = probe_rates(mint(tiny_pair, Signature.from_string(sig), 8, minted_at=STAMP).model().logits_np, bank)
        for bit, rate in zip(sig, rates):
            assert (rate > 0.9) if bit == "1" else (rate < 0.5)
