import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shiftkd.augment import AugmentConfig
from shiftkd.cache import EmbeddingCache
from shiftkd.core import ConfigError, DataError, Domain, Split, build_manifest, sha256_file
from shiftkd.distill import (FeatureAdapter, FeatureBatch, FreezePolicy, LossConfig, adapt_features,
                             apply_freeze_policy, frozen_parameters, hint_loss, hint_loss_grad, set_train_mode,
                             teacher_embed, teacher_matrix, total_loss)
from shiftkd.encoders import CachedOnlyEncoder
from shiftkd.harness.models import ConvStudent

from conftest import make_record, write_png


def brute_hint(s, t):
    s, t = np.asarray(s, float), np.asarray(t, float)
    acc, n = 0.0, 0
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            acc += (s[i, j] - t[i, j]) ** 2
            n += 1
    return acc / n


def test_hint_examples():
    s = torch.tensor([[3.0, 1.0]])
    t = torch.tensor([[1.0, 1.0]])
    assert hint_loss(s, t).item() == 2.0
    assert hint_loss(t + 2 * (s - t), t).item() == 8.0
    assert hint_loss(s, s).item() == 0.0
    assert brute_hint(s, t) == 2.0


def test_total_loss_examples():
    assert total_loss(0.7, 99.0, LossConfig(alpha=1.0)) == 0.7
    assert total_loss(99.0, 0.3, LossConfig(alpha=0.0)) == 0.3
    assert total_loss(2.0, 1.0, LossConfig(alpha=0.5)) == 1.5


# dyadic grid keeps squared residuals away from underflow
elems = st.integers(-2**20, 2**20).map(lambda k: k / 1024)
mats = st.integers(1, 6).flatmap(lambda b: st.integers(1, 6).flatmap(lambda c: st.tuples(
    arrays(np.float64, (b, c), elements=elems), arrays(np.float64, (b, c), elements=elems))))


@given(mats)
def test_hint_properties(pair):
    s, t = (torch.from_numpy(a) for a in pair)
    v = hint_loss(s, t).item()
    assert v >= 0
    assert (v == 0) == bool(torch.equal(s, t))
    assert v == pytest.approx(brute_hint(*pair), rel=1e-9, abs=1e-12)
    perm = torch.randperm(s.shape[0], generator=torch.Generator().manual_seed(0))
    assert hint_loss(s[perm], t[perm]).item() == pytest.approx(v, rel=1e-12)


@given(st.floats(0, 1), st.floats(0, 100), st.floats(0, 100))
def test_total_loss_affine(alpha, ce, hint):
    v = total_loss(ce, hint, LossConfig(alpha=alpha))
    assert v == pytest.approx(hint + alpha * (ce - hint), abs=1e-9)
    assert total_loss(ce, hint, LossConfig(alpha=0.5)) == pytest.approx((ce + hint) / 2)


def test_hint_errors():
    with pytest.raises(DataError, match="shape"):
        hint_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    with pytest.raises(DataError, match="different records"):
        hint_loss(FeatureBatch(("a", "b"), torch.zeros(2, 3)), FeatureBatch(("b", "a"), torch.zeros(2, 3)))
    with pytest.raises(DataError):
        FeatureBatch(("a",), torch.zeros(2, 3))


def test_closed_form_gradient():
    g = torch.Generator().manual_seed(0)
    s = torch.randn(5, 7, dtype=torch.float64, generator=g, requires_grad=True)
    t = torch.randn(5, 7, dtype=torch.float64, generator=g)
    hint_loss(s, t).backward()
    torch.testing.assert_close(s.grad, hint_loss_grad(s.detach(), t), rtol=1e-12, atol=0)


def _finite_difference_check(seed, eps=1e-6):
    g = torch.Generator().manual_seed(seed)
    b, cs, ct = (int(x) for x in torch.randint(1, 9, (3,), generator=g))
    adapter = FeatureAdapter(cs, ct + cs, "linear", g).double()  # widths differ -> real projection
    s = torch.randn(b, cs, dtype=torch.float64, generator=g, requires_grad=True)
    t = torch.randn(b, ct + cs, dtype=torch.float64, generator=g)
    hint_loss(adapter(s), t).backward()
    analytic = torch.cat([s.grad.ravel(), adapter.proj.weight.grad.ravel(), adapter.proj.bias.grad.ravel()])
    params = [s, adapter.proj.weight, adapter.proj.bias]
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = hint_loss(adapter(s), t).item()
                flat[i] = old - eps
                down = hint_loss(adapter(s), t).item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return (analytic - numeric).norm().item() / max(numeric.norm().item(), 1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_through_linear_adapter(seed):
    assert _finite_difference_check(seed) < 1e-4


def test_adapter_modes():
    s = torch.randn(3, 768)
    ident = FeatureAdapter(768, 768, "auto")
    assert ident.kind == "identity" and torch.equal(ident(s), s)
    lin = FeatureAdapter(768, 1024, "auto")
    assert lin.kind == "linear"
    with torch.no_grad():
        lin.proj.weight.zero_()
        lin.proj.bias.zero_()
    out = adapt_features(FeatureBatch(tuple("abc"), s), lin)
    assert out.features.shape == (3, 1024) and not out.features.any()
    assert out.record_ids == ("a", "b", "c")
    with pytest.raises(DataError):
        FeatureAdapter(768, 1024, "identity")
    assert LossConfig().resolved_adapter(4, 4) == "identity"
    with pytest.raises(ConfigError):
        LossConfig(alpha=1.5)


def _trainable_blocks(model):
    return [i for i, b in enumerate(model.blocks) if all(p.requires_grad for p in b.parameters())]


def test_freeze_policy_examples():
    m = apply_freeze_policy(ConvStudent(3), FreezePolicy(2, True))
    assert len(m.blocks) == 8
    assert _trainable_blocks(m) == [6, 7]
    assert all(p.requires_grad for p in m.head.parameters())
    m = apply_freeze_policy(ConvStudent(3), FreezePolicy(0, True))
    assert _trainable_blocks(m) == []
    assert {k for k, p in m.named_parameters() if p.requires_grad} == {"head.weight", "head.bias"}
    m = apply_freeze_policy(ConvStudent(3), FreezePolicy(8, True))
    assert not frozen_parameters(m)
    with pytest.raises(ConfigError):
        apply_freeze_policy(ConvStudent(3), FreezePolicy(9, True))


def test_frozen_blocks_do_not_move():
    torch.manual_seed(0)
    m = apply_freeze_policy(ConvStudent(3), FreezePolicy(2, True))
    before = {k: v.detach().clone() for k, v in m.state_dict().items()}
    opt = torch.optim.AdamW([p for p in m.parameters() if p.requires_grad], lr=1e-2, weight_decay=1e-2)
    x, y = torch.randn(8, 3, 16, 16), torch.randint(0, 3, (8,))
    for _ in range(5):
        set_train_mode(m)
        loss = F.cross_entropy(m(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    after = m.state_dict()
    for k in before:
        moved = not torch.equal(before[k], after[k])
        block = int(k.split(".")[1]) if k.startswith("blocks.") else None
        if block is not None and block < 6:
            assert not moved, k
    assert not torch.equal(before["head.weight"], after["head.weight"])
    assert not torch.equal(before["blocks.7.0.weight"], after["blocks.7.0.weight"])


class CountingTeacher:
    fingerprint = "count-teacher-1"

    def __init__(self):
        self.calls = 0

    def encode(self, pixels, records):
        self.calls += 1
        return pixels.mean(axis=(2, 3)).astype(np.float32) + 1.0


def _image_manifest(tmp_path, n=6):
    recs, split = [], {}
    for i in range(n):
        p = write_png(tmp_path / f"{i}.png", seed=i % 4)
        recs.append(make_record(i, "x", Domain.TARGET, uri=str(p), checksum=sha256_file(p)))
        split[recs[-1].record_id] = Split.TEST if i == n - 1 else Split.TRAIN
    return build_manifest(recs, split=split)


def test_teacher_embed_cache(tmp_path):
    m = _image_manifest(tmp_path)
    cfg = AugmentConfig(final_size=8)
    cache = EmbeddingCache(tmp_path / "cache")
    t1 = CountingTeacher()
    e1 = teacher_embed(m, t1, cache, cfg)
    assert t1.calls == 1
    assert set(e1) == {r.record_id for r in m.records[:-1]}  # TRAIN only
    np.testing.assert_array_equal(e1["r00000"], e1["r00004"])  # identical images
    t2 = CountingTeacher()
    e2 = teacher_embed(m, t2, cache, cfg)
    assert t2.calls == 0
    for k in e1:
        np.testing.assert_array_equal(e1[k], e2[k])
    # a cache-only teacher works warm and fails cold
    warm = teacher_embed(m, CachedOnlyEncoder(t1.fingerprint), cache, cfg)
    assert set(warm) == set(e1)
    with pytest.raises(DataError, match="cache"):
        teacher_embed(m, CachedOnlyEncoder("never-seen"), cache, cfg)
    assert teacher_embed(build_manifest([]), t1, cache, cfg) == {}


def test_teacher_embed_normalize(tmp_path):
    e = teacher_embed(_image_manifest(tmp_path), CountingTeacher(), None, AugmentConfig(final_size=8), normalize=True)
    for v in e.values():
        assert np.linalg.norm(v) == pytest.approx(1.0, rel=1e-5)


def test_teacher_matrix_alignment():
    emb = {"a": np.ones(3), "b": np.zeros(3)}
    fb = teacher_matrix(emb, ["b", "a"])
    assert fb.record_ids == ("b", "a") and fb.features[1].sum() == 3
    with pytest.raises(DataError, match="'c'"):
        teacher_matrix(emb, ["c"])
