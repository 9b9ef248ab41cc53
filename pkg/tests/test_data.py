import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from agbada.data import (ArraySource, AugmentConfig, ImageSource, IndexRow, SplitAssignment, augment,
                         batches, class_distribution, derive_gender, load_image, load_index,
                         resize_bilinear, steps_per_epoch, stratified_split)
from agbada.errors import ImageError, ParameterError, ValidationError
from agbada.tensor import Rng, Stream
from oracles import bilinear_half_pixel

STYLES_F = ["African Blouse", "Wrapper", "Gele", "Iro"]
STYLES_M = ["Agbada", "Kaftan", "Dashiki", "Fila"]


def write_csv(path, rows, header="image_id,clothing,gender"):
    path.write_text(header + "\n" + "".join(",".join(r) + "\n" for r in rows), encoding="utf-8")
    return path


def corpus_rows(n_f, n_m):
    rows = [IndexRow(f"f{i}.png", STYLES_F[i % 4], "Female") for i in range(n_f)]
    rows += [IndexRow(f"m{i}.png", STYLES_M[i % 4], "Male") for i in range(n_m)]
    return rows


class TestIndex:
    def test_full_corpus(self, tmp_path):
        rows = corpus_rows(1000, 600)
        path = write_csv(tmp_path / "i.csv", [(r.image_id, r.clothing, r.gender) for r in rows])
        loaded = load_index(path)
        assert len(loaded) == 1600
        dist = class_distribution(loaded)
        assert dist["Female"][0] == 1000 and dist["Male"][0] == 600

    def test_header_only(self, tmp_path):
        assert load_index(write_csv(tmp_path / "i.csv", [])) == []

    def test_unknown_gender_cites_row(self, tmp_path):
        rows = [(f"x{i}.png", "Agbada", "Male") for i in range(10)]
        rows[6] = ("x6.png", "Agbada", "Unknown")
        with pytest.raises(ValidationError, match=r"row 7\b"):
            load_index(write_csv(tmp_path / "i.csv", rows))

    def test_missing_column(self, tmp_path):
        with pytest.raises(ValidationError, match="gender"):
            load_index(write_csv(tmp_path / "i.csv", [("a.png", "Agbada")], header="image_id,clothing"))

    def test_gender_optional_when_deriving(self, tmp_path):
        path = write_csv(tmp_path / "i.csv", [("a.png", "Agbada")], header="image_id,clothing")
        rows = derive_gender(load_index(path, require_gender=False), {"Agbada": "Male"})
        assert rows == [IndexRow("a.png", "Agbada", "Male")]

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.csv"):
            load_index(tmp_path / "nope.csv")


class TestDistribution:
    def test_paper_balance(self):
        dist = class_distribution(corpus_rows(1000, 600))
        assert dist == {"Female": (1000, 0.625), "Male": (600, 0.375)}

    def test_single_class(self):
        assert class_distribution(corpus_rows(3, 0)) == {"Female": (3, 1.0)}

    def test_three_to_one(self):
        dist = class_distribution(corpus_rows(3, 1))
        assert (dist["Female"][1], dist["Male"][1]) == (0.75, 0.25)

    @given(st.integers(0, 50), st.integers(0, 50))
    def test_fractions_sum_to_one(self, f, m):
        if f + m == 0:
            return
        assert abs(sum(v[1] for v in class_distribution(corpus_rows(f, m)).values()) - 1) <= 1e-9


def _gender_counts(rows, idx):
    return (sum(rows[i].gender == "Female" for i in idx), sum(rows[i].gender == "Male" for i in idx))


class TestSplit:
    def test_paper_corpus(self):
        rows = corpus_rows(1000, 600)
        s = stratified_split(rows, seed=0)
        assert [len(s.train), len(s.val), len(s.test)] == [1280, 160, 160]
        assert _gender_counts(rows, s.train) == (800, 480)
        assert _gender_counts(rows, s.val) == (100, 60)
        assert _gender_counts(rows, s.test) == (100, 60)

    def test_deterministic(self):
        rows = corpus_rows(37, 21)
        assert stratified_split(rows, seed=5) == stratified_split(rows, seed=5)
        assert stratified_split(rows, seed=5) != stratified_split(rows, seed=6)

    def test_ten_rows(self):
        rows = corpus_rows(5, 5)
        s = stratified_split(rows, seed=1)
        assert [len(s.train), len(s.val), len(s.test)] == [8, 1, 1]
        for part, share in ((s.train, 0.8), (s.val, 0.1), (s.test, 0.1)):
            f, m = _gender_counts(rows, part)
            assert abs(f - 5 * share) < 1 and abs(m - 5 * share) < 1

    @given(st.integers(0, 300), st.integers(0, 300), st.integers(0, 2**32))
    def test_partition_properties(self, n_f, n_m, seed):
        rows = corpus_rows(n_f, n_m)
        s = stratified_split(rows, seed=seed)
        parts = [set(s.train), set(s.val), set(s.test)]
        assert sum(map(len, parts)) == len(rows)
        assert set().union(*parts) == set(range(len(rows)))
        for part, share in zip(parts, (0.8, 0.1, 0.1)):
            f, m = _gender_counts(rows, part)
            assert abs(f - n_f * share) < 1 and abs(m - n_m * share) < 1
            assert abs(len(part) - len(rows) * share) < 1

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ParameterError):
            stratified_split(corpus_rows(5, 5), (0.8, 0.1, 0.2))

    def test_json_round_trip(self):
        s = stratified_split(corpus_rows(20, 12), seed=3)
        assert SplitAssignment.from_json(s.to_json()) == s


class TestImages:
    @pytest.mark.parametrize("value,mode", [(255, "RGB"), (0, "RGB"), (255, "RGBA")])
    def test_solid(self, tmp_path, value, mode):
        path = tmp_path / "solid.png"
        Image.new(mode, (180, 180), (value,) * len(mode)).save(path)
        img = load_image(path, (180, 180))
        assert img.shape == (3, 180, 180) and img.dtype == np.float32
        assert np.all(img == value / 255)

    def test_bilinear_checkerboard(self):
        board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        expected = bilinear_half_pixel(board, 4, 4)
        assert np.allclose(resize_bilinear(board, (4, 4)), expected, atol=1e-12)
        # hand values: rows/cols sample at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert expected[0, 0].tolist() == [0.0, 0.25, 0.75, 1.0]
        assert expected[0, 1].tolist() == [0.25, 0.375, 0.625, 0.75]

    def test_resize_random_matches_oracle(self, rng):
        img = rng.random((3, 7, 5))
        assert np.allclose(resize_bilinear(img, (11, 4)), bilinear_half_pixel(img, 11, 4), atol=1e-12)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
        with pytest.raises(ImageError):
            load_image(path)

    def test_unsupported_depth(self, tmp_path):
        path = tmp_path / "deep.png"
        Image.new("I;16", (4, 4)).save(path)
        with pytest.raises(ImageError, match="mode"):
            load_image(path, (4, 4))


class TestAugment:
    def img(self, rng):
        return rng.random((3, 12, 10)).astype(np.float32)

    def test_zero_magnitudes_identity(self, rng):
        x = self.img(rng)
        cfg = AugmentConfig(0.0, 0.0, 0.0, 0.0)
        assert np.array_equal(augment(x, cfg, Rng(1, Stream.AUGMENT)), x)

    def test_flip_is_involution(self, rng):
        x = self.img(rng)
        cfg = AugmentConfig(1.0, 0.0, 0.0, 0.0)
        r = Rng(1, Stream.AUGMENT)
        once = augment(x, cfg, r)
        assert np.array_equal(once, x[:, :, ::-1])
        assert np.array_equal(augment(once, cfg, r), x)

    def test_disabled_is_identity(self, rng):
        x = self.img(rng)
        assert np.array_equal(augment(x, AugmentConfig(enabled=False), Rng(0)), x)

    @given(st.integers(0, 2**32))
    def test_shape_and_range(self, seed):
        x = np.random.default_rng(seed).random((3, 9, 13)).astype(np.float32)
        y = augment(x, AugmentConfig(), Rng(seed, Stream.AUGMENT))
        assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1

    def test_deterministic(self, rng):
        x = self.img(rng)
        a = augment(x, AugmentConfig(), Rng(4, Stream.AUGMENT))
        b = augment(x, AugmentConfig(), Rng(4, Stream.AUGMENT))
        assert a.tobytes() == b.tobytes()

    class FixedDraws:
        def __init__(self, u):
            self.u = np.array(u, dtype=np.float64)

        def uniform(self, n):
            assert n == 5
            return self.u

    def test_shift_by_one_pixel(self, rng):
        x = rng.random((2, 5, 5)).astype(np.float32)
        # u[2] = 1 gives tx = +shift_frac_max * W = +1 pixel
        y = augment(x, AugmentConfig(0.0, 0.0, 0.2, 0.0), self.FixedDraws([1, 0.5, 1.0, 0.5, 0.5]))
        assert np.allclose(y[:, :, 1:], x[:, :, :-1], atol=1e-6)
        assert np.allclose(y[:, :, 0], x[:, :, 0], atol=1e-6)  # edge fill

    def test_quarter_turn(self, rng):
        x = rng.random((1, 5, 5)).astype(np.float32)
        y = augment(x, AugmentConfig(0.0, 90.0, 0.0, 0.0), self.FixedDraws([1, 1.0, 0.5, 0.5, 0.5]))
        assert np.allclose(y, np.rot90(x, -1, axes=(1, 2)), atol=1e-6)

    def test_zoom_keeps_centre(self):
        x = np.zeros((1, 5, 5), np.float32)
        x[0, 2, 2] = 1.0
        y = augment(x, AugmentConfig(0.0, 0.0, 0.0, 0.5), self.FixedDraws([1, 0.5, 0.5, 0.5, 1.0]))
        assert y[0, 2, 2] == 1.0 and y.sum() > 1.0

    @pytest.mark.parametrize("kw", [{"horizontal_flip_prob": 1.5}, {"rotation_deg_max": -1},
                                    {"zoom_frac_max": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            AugmentConfig(**kw)


class TestBatches:
    @pytest.mark.parametrize("n,b,steps", [(1280, 128, 10), (1600, 128, 13), (5, 2, 3)])
    def test_steps(self, n, b, steps):
        assert steps_per_epoch(n, b) == steps

    def source(self, n):
        rows = [IndexRow(f"{i}.png", "Agbada" if i % 2 else "Wrapper", "Male" if i % 2 else "Female")
                for i in range(n)]
        images = {r.image_id: np.full((3, 4, 4), i / n, np.float32) for i, r in enumerate(rows)}
        return rows, ArraySource(images)

    def test_sizes(self):
        rows, src = self.source(5)
        assert [len(b) for b in batches(rows, 2, src)] == [2, 2, 1]

    def test_eval_order_is_index_order(self):
        rows, src = self.source(7)
        ids = [i for b in batches(rows, 3, src) for i in b.row_ids]
        assert ids == list(range(7))

    def test_targets_follow_class_index(self):
        rows, src = self.source(4)
        b = next(iter(batches(rows, 4, src)))
        assert b.targets[:, 0].tolist() == [0, 1, 0, 1]
        assert b.inputs.shape == (4, 3, 4, 4)

    def test_shuffle_reproducible_per_epoch(self):
        rows, src = self.source(20)
        order = lambda e: [i for b in batches(rows, 6, src, shuffle=True, seed=1, epoch=e) for i in b.row_ids]
        assert order(1) == order(1)
        assert order(1) != order(2)
        assert sorted(order(3)) == list(range(20))

    def test_augmented_bytes_reproducible(self):
        rows, src = self.source(9)
        run = lambda: b"".join(b.inputs.tobytes() for b in
                               batches(rows, 4, src, shuffle=True, seed=2, augment_cfg=AugmentConfig(), epoch=3))
        assert run() == run()

    def test_bad_batch_size(self):
        rows, src = self.source(3)
        with pytest.raises(ParameterError):
            list(batches(rows, 0, src))

    def test_image_source(self, tiny_corpus):
        image_dir, index_csv, _ = tiny_corpus
        rows = load_index(index_csv)
        src = ImageSource(image_dir, 32)
        src.check(rows)
        assert src(rows[0]).shape == (3, 32, 32)
        with pytest.raises(FileNotFoundError, match="row 1"):
            src.check([IndexRow("missing.png", "x", "Male")])


class TestDeriveGender:
    def test_paper_rows(self):
        rows = [IndexRow("African_Blouse_1.png", "African Blouse", None),
                IndexRow("African_Blouse_2.png", "African Blouse", None)]
        assert {r.gender for r in derive_gender(rows, {"African Blouse": "Female"})} == {"Female"}

    def test_empty(self):
        assert derive_gender([], {}) == []

    def test_unmapped_style_named(self):
        with pytest.raises(ValidationError, match="Agbada"):
            derive_gender([IndexRow("a.png", "Agbada", None)], {"Wrapper": "Female"})
