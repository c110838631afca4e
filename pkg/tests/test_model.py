import dataclasses

import numpy as np
import pytest

from conftest import gradcheck
from linewise import geometry as G
from linewise import model as Mdl
from linewise import tensor as T
from linewise.geometry import LineSegment2D as Seg
from linewise.tensor import Tensor


def unit_grid(rng, rows=30, cols=40, dim=16):
    g = rng.normal(size=(rows, cols, dim))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def random_lines(rng, count, width=320, height=240, max_len=160):
    lines = []
    while len(lines) < count:
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        a, length = rng.uniform(0, np.pi), rng.uniform(8, max_len)
        seg = G.clip_to_image(Seg(x, y, x + length * np.cos(a), y + length * np.sin(a), len(lines)), width, height)
        if seg is not None and seg.length >= 8:
            lines.append(seg)
    return lines


def tiny_config(**kw):
    base = dict(D=8, L=1, M=1, heads=2, n_max=21)
    base.update(kw)
    return Mdl.ModelConfig(**base)


def pad_tokens(seq: Mdl.TokenSequence, slots: int, fill=0.0) -> Mdl.TokenSequence:
    extra = slots - seq.mask.size
    emb = np.vstack([seq.embeddings, np.full((extra, seq.embeddings.shape[1]), fill)])
    pos = np.vstack([seq.positional, np.zeros((extra, seq.positional.shape[1]))])
    return dataclasses.replace(seq, embeddings=emb, positional=pos, mask=np.r_[seq.mask, np.ones(extra, bool)])


class TestLookup:
    def test_cell_center(self, rng):
        dm = Mdl.DescriptorMap(unit_grid(rng), 8)
        np.testing.assert_allclose(Mdl.lookup_point_embedding(dm, 8 * 3.5, 8 * 7.5), dm.grid[7, 3], atol=1e-15)

    def test_between_identical_cells(self, rng):
        g = unit_grid(rng)
        g[4, 6] = g[4, 5]
        dm = Mdl.DescriptorMap(g, 8)
        np.testing.assert_allclose(dm.lookup(8 * 6.0, 8 * 4.5), g[4, 5], atol=1e-15)

    def test_hand_bilinear(self):
        g = np.zeros((1, 2, 2))
        g[0, 0, 0] = 1.0
        g[0, 1, 1] = 1.0
        dm = Mdl.DescriptorMap(g, 8)
        got = dm.lookup((0.25 + 0.5) * 8, 0.5 * 8)
        expected = np.array([0.75, 0.25]) / np.hypot(0.75, 0.25)
        np.testing.assert_allclose(got, expected, atol=1e-15)

    def test_out_of_bounds(self, rng):
        dm = Mdl.DescriptorMap(unit_grid(rng), 8)
        with pytest.raises(ValueError):
            dm.lookup(-1.0, 3.0)
        with pytest.raises(ValueError):
            dm.lookup(3.0, 240.5)

    def test_non_unit_grid_rejected(self):
        with pytest.raises(ValueError):
            Mdl.DescriptorMap(np.ones((2, 2, 3)), 8)

    def test_file_round_trip(self, rng, tmp_path):
        dm = Mdl.DescriptorMap(unit_grid(rng).astype(np.float32).astype(np.float64), 8)
        dm.save(tmp_path / "m.bin")
        back = Mdl.DescriptorMap.load(tmp_path / "m.bin")
        assert back.stride == 8 and np.array_equal(back.grid, dm.grid)


class TestPositional:
    def _points(self):
        return G.sample_points(Seg(10, 10, 40, 10), 8)

    def test_zero_weights(self):
        cfg = tiny_config()
        params = Mdl.init_params(cfg)
        for name in ("positional.fc1.w", "positional.fc2.w"):
            params[name].data[:] = 0.0
        out = Mdl.positional_embedding(self._points(), params, cfg).data
        assert np.all(out == out[0])

    def test_same_inputs_same_rows(self):
        cfg = tiny_config()
        params = Mdl.init_params(cfg)
        pts = [G.PointToken(5, 5, 1.0), G.PointToken(5, 5, 1.0), G.PointToken(9, 5, 0.5)]
        out = Mdl.positional_embedding(pts, params, cfg).data
        assert np.array_equal(out[1], out[2]) and not np.array_equal(out[1], out[3])

    def test_gradient(self):
        cfg = tiny_config()
        params = Mdl.init_params(cfg)
        group = params.group("positional")
        names = list(group)
        w = np.random.default_rng(0).normal(size=(5, cfg.D))

        def build(*ws):
            for n, t in zip(names, ws):
                params[f"positional.{n}"].data = t.data
            return (Mdl.positional_embedding(self._points(), params, cfg) * w).sum()

        assert gradcheck(build, [group[n] for n in names]) < 1e-4


class TestTokenizer:
    def _setup(self, rng, **kw):
        cfg = tiny_config(**kw)
        return cfg, Mdl.init_params(cfg), Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)

    def test_full_length(self, rng):
        cfg, params, dm = self._setup(rng)
        sub = G.split_into_sublines(Seg(10, 10, 170, 10), 8, 21)[0]
        seq = Mdl.tokenize_line(sub, dm, params, cfg)
        assert seq.n_actual == 21 and not seq.mask.any()

    def test_minimum_length(self, rng):
        cfg, params, dm = self._setup(rng)
        seq = Mdl.tokenize_line(G.Subline(Seg(10, 10, 18, 10), 0, 0, 1), dm, params, cfg)
        assert seq.n_actual == 2 and seq.mask.sum() == cfg.n_max - 2 and not seq.mask[0]
        assert np.all(seq.embeddings[seq.mask] == 0)

    def test_slot_embeddings_match_lookup(self, rng):
        cfg, params, dm = self._setup(rng)
        line = Seg(13.2, 40.1, 90.7, 120.3)
        seq = Mdl.tokenize_line(G.Subline(line, 0, 0, 1), dm, params, cfg)
        for k, p in enumerate(G.sample_points(line, cfg.v), start=1):
            np.testing.assert_array_equal(seq.embeddings[k], Mdl.lookup_point_embedding(dm, p.x, p.y))
        np.testing.assert_array_equal(seq.embeddings[0], params["line_token"].data)

    def test_token_count_violation(self, rng):
        cfg, params, dm = self._setup(rng, n_min=3)
        with pytest.raises(ValueError):
            Mdl.tokenize_line(G.Subline(Seg(10, 10, 18, 10), 0, 0, 1), dm, params, cfg)


class TestTransformer:
    def test_empty_stack(self, rng):
        cfg = tiny_config(L=0)
        params = Mdl.init_params(cfg)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        line = Seg(20, 30, 100, 90)
        seq = Mdl.tokenize_line(G.Subline(line, 0, 0, 1), dm, params, cfg)
        d = Mdl.transformer_forward([seq], params, cfg).descriptors.data[0]
        row0 = Mdl.positional_embedding(G.sample_points(line, cfg.v), params, cfg).data[0]
        expected = T.l2_normalize(Tensor(params["line_token"].data + row0)).data
        assert np.array_equal(d, expected)

    def test_masked_garbage_is_invisible(self, rng):
        cfg = tiny_config(L=2)
        params = Mdl.init_params(cfg)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        seqs = [Mdl.tokenize_line(G.Subline(l, 0, 0, 1), dm, params, cfg) for l in random_lines(rng, 4)]
        base = Mdl.transformer_forward(seqs, params, cfg).descriptors.data
        dirty = []
        for s in seqs:
            emb = s.embeddings.copy()
            emb[s.mask] = rng.normal(size=(s.mask.sum(), cfg.D)) * 50
            dirty.append(dataclasses.replace(s, embeddings=emb))
        assert np.array_equal(Mdl.transformer_forward(dirty, params, cfg).descriptors.data, base)

    def test_padding_growth(self, rng):
        cfg = tiny_config(L=2)
        params = Mdl.init_params(cfg)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        seqs = [Mdl.tokenize_line(G.Subline(l, 0, 0, 1), dm, params, cfg) for l in random_lines(rng, 6)]
        base = Mdl.transformer_forward(seqs, params, cfg).descriptors.data
        for slots in (23, 30, 64):
            grown = [pad_tokens(s, slots, fill=7.0) for s in seqs]
            assert np.array_equal(Mdl.transformer_forward(grown, params, cfg).descriptors.data, base)

    def test_slot_zero_attention_rows(self, rng):
        cfg = tiny_config(L=2)
        params = Mdl.init_params(cfg)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        seqs = [Mdl.tokenize_line(G.Subline(l, 0, 0, 1), dm, params, cfg) for l in random_lines(rng, 5)]
        out = Mdl.transformer_forward(seqs, params, cfg, record_attention=True)
        assert len(out.line_attention) == cfg.L
        for rec in out.line_attention:
            for b, s in enumerate(seqs):
                rows = rec[b]
                assert np.all(rows[:, s.mask] == 0)
                np.testing.assert_allclose(rows.sum(-1), 1.0, atol=1e-9)

    def test_gradient(self, rng):
        cfg = tiny_config(D=8, L=1)
        params = Mdl.init_params(cfg, seed=3)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        seq = Mdl.tokenize_line(G.Subline(Seg(20, 20, 36, 20), 0, 0, 1), dm, params, cfg)
        assert seq.n_actual == 3
        names = [n for n in params if not n.startswith("signature")]
        w = rng.normal(size=cfg.D)

        def build(*ws):
            for n, t in zip(names, ws):
                params[n].data = t.data
            return (Mdl.transformer_forward([seq], params, cfg).descriptors * w).sum()

        assert gradcheck(build, [params[n] for n in names]) < 1e-3


class TestSignature:
    def _inputs(self, rng, m, cfg):
        d = rng.normal(size=(m, cfg.D))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d, rng.uniform(-1, 1, size=(m, 5))

    def test_single_line(self, rng):
        cfg = tiny_config(M=2)
        params = Mdl.init_params(cfg)
        d, a = self._inputs(rng, 1, cfg)
        out = Mdl.line_signature_forward(Tensor(d), a, params, cfg, record_attention=True)
        assert all(np.array_equal(rec, np.ones((cfg.heads, 1, 1))) for rec in out.attention)
        again = Mdl.line_signature_forward(Tensor(d), a, params, cfg)
        assert np.array_equal(out.descriptors.data, again.descriptors.data)

    def test_permutation_equivariance(self, rng):
        cfg = tiny_config(M=2)
        params = Mdl.init_params(cfg)
        d, a = self._inputs(rng, 7, cfg)
        perm = rng.permutation(7)
        base = Mdl.line_signature_forward(Tensor(d), a, params, cfg).descriptors.data
        moved = Mdl.line_signature_forward(Tensor(d[perm]), a[perm], params, cfg).descriptors.data
        np.testing.assert_allclose(moved, base[perm], atol=1e-12)

    def test_empty(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            Mdl.line_signature_forward(Tensor(np.zeros((0, cfg.D))), np.zeros((0, 5)), Mdl.init_params(cfg), cfg)

    def test_gradient(self, rng):
        cfg = tiny_config(D=8, M=1)
        params = Mdl.init_params(cfg, seed=5)
        d, a = self._inputs(rng, 3, cfg)
        names = [n for n in params if n.startswith("signature")]
        w = rng.normal(size=(3, cfg.D))
        x = Tensor(d)

        def build(x, *ws):
            for n, t in zip(names, ws):
                params[n].data = t.data
            return (Mdl.line_signature_forward(x, a, params, cfg).descriptors * w).sum()

        assert gradcheck(build, [x] + [params[n] for n in names]) < 1e-3


class TestDescribeImage:
    def test_single_short_keyline(self, rng):
        cfg = tiny_config()
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        out = Mdl.describe_image([Seg(10, 10, 50, 10, 3)], dm, Mdl.init_params(cfg), cfg)
        assert out.descriptors.shape == (1, cfg.D)
        np.testing.assert_array_equal(out.adjacency, [[1.0]])

    def test_split_keyline(self, rng):
        cfg = tiny_config()
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        out = Mdl.describe_image([Seg(10, 10, 250, 10, 3)], dm, Mdl.init_params(cfg), cfg)
        np.testing.assert_array_equal(out.adjacency, [[0.5, 0.5]])

    def test_drops_short_lines(self, rng):
        cfg = tiny_config()
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        with pytest.raises(ValueError):
            Mdl.describe_image([Seg(10, 10, 15, 10)], dm, Mdl.init_params(cfg), cfg)
        out = Mdl.describe_image([Seg(10, 10, 15, 10, 0), Seg(10, 20, 40, 20, 1)], dm, Mdl.init_params(cfg), cfg)
        assert out.keyline_ids == [1]

    def test_unit_norm_scene(self, rng):
        cfg = Mdl.ModelConfig()
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        out = Mdl.describe_image(random_lines(rng, 20, max_len=300), dm, Mdl.init_params(cfg), cfg)
        np.testing.assert_allclose(np.linalg.norm(out.descriptors.data, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(out.keyline_descriptors().data, axis=1), 1.0, atol=1e-6)

    def test_invariant_to_n_max_growth(self, rng):
        cfg = tiny_config(L=2, M=2)
        params = Mdl.init_params(cfg)
        dm = Mdl.DescriptorMap(unit_grid(rng, dim=cfg.D), 8)
        lines = random_lines(rng, 12, max_len=150)
        base = Mdl.describe_image(lines, dm, params, cfg).descriptors.data
        wide = dataclasses.replace(cfg, n_max=40)
        assert np.array_equal(Mdl.describe_image(lines, dm, params, wide).descriptors.data, base)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        cfg = tiny_config()
        params = Mdl.init_params(cfg, seed=9)
        Mdl.save_checkpoint(tmp_path / "a.ckpt", params, cfg, {"step": 3}, {"x": np.arange(3.0)})
        ck = Mdl.load_checkpoint(tmp_path / "a.ckpt")
        assert ck.config == cfg and ck.meta == {"step": 3}
        for n, t in params.items():
            assert np.array_equal(ck.params[n].data, t.data)
        Mdl.save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.config, ck.meta, ck.arrays)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated(self, tmp_path):
        cfg = tiny_config()
        raw = Mdl.checkpoint_bytes(Mdl.init_params(cfg), cfg)
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(Mdl.CheckpointError):
            Mdl.load_checkpoint(tmp_path / "t.ckpt")

    def test_checksum(self):
        import hashlib

        cfg = tiny_config()
        raw = Mdl.checkpoint_bytes(Mdl.init_params(cfg), cfg)
        assert hashlib.sha256(raw[:-32]).digest() == raw[-32:]
        corrupted = bytearray(raw)
        corrupted[40] ^= 0xFF
        with pytest.raises(Mdl.CheckpointError, match="checksum"):
            Mdl.parse_checkpoint(bytes(corrupted))

    def test_version_mismatch(self):
        import hashlib
        import struct

        cfg = tiny_config()
        raw = bytearray(Mdl.checkpoint_bytes(Mdl.init_params(cfg), cfg)[:-32])
        raw[4:8] = struct.pack("<I", 99)
        raw = bytes(raw) + hashlib.sha256(bytes(raw)).digest()
        with pytest.raises(Mdl.CheckpointError, match="version"):
            Mdl.parse_checkpoint(raw)


def test_config_validation():
    with pytest.raises(ValueError):
        Mdl.ModelConfig(D=10, heads=4)
    with pytest.raises(ValueError):
        Mdl.ModelConfig(n_min=1)
    with pytest.raises(ValueError):
        Mdl.ModelConfig(v=0)
