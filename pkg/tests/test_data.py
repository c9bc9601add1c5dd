import numpy as np
import pytest
from PIL import Image

from aucvt.data import (
    EXPRESSION_INDEX,
    OPENFACE_AU_IDS,
    AUVector,
    Sample,
    decode_and_resize,
    emit_manifest,
    load_manifest,
    load_samples,
    parse_openface_csv,
    select_au_subset,
)
from aucvt.errors import ContractError, DecodeError, ManifestError, SchemaError
from aucvt.model import CANONICAL_AU_IDS


class TestAUVector:
    def test_from_sets_round_trip(self):
        vec = AUVector.from_sets([1, 2, 25], [1, 2, 25])
        assert vec.present_aus() == (1, 2, 25)
        assert vec.known_aus() == (1, 2, 25)
        values, mask = vec.to_arrays()
        assert values.sum() == 3 and mask.sum() == 3

    def test_known_superset_of_present(self):
        vec = AUVector.from_sets([6], OPENFACE_AU_IDS)
        assert vec.present_aus() == (6,)
        assert vec.known_aus() == OPENFACE_AU_IDS

    def test_unknown_au_rejected(self):
        with pytest.raises(ContractError):
            AUVector.from_sets([28], [28])

    def test_value_outside_mask_rejected(self):
        values = [0] * 21
        mask = [0] * 21
        values[0] = 1
        with pytest.raises(ContractError):
            AUVector(tuple(values), tuple(mask))

    def test_select_subset_zeroes_masked_values(self):
        vec = AUVector.from_sets([1, 2, 25], OPENFACE_AU_IDS)
        sub = select_au_subset(vec, [1, 25, 26])
        assert sub.present_aus() == (1, 25)
        assert sub.known_aus() == (1, 25, 26)

    def test_sample_needs_some_label(self):
        with pytest.raises(ContractError):
            Sample(image_path="x.png")


def write_manifest(tmp_path, text, name="m.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestManifest:
    def test_expression_only_row(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,happiness,\n")
        m = load_manifest(path, check_files=False)
        assert len(m.samples) == 1
        s = m.samples[0]
        assert s.expression == EXPRESSION_INDEX["happiness"] == 3
        assert s.au is None

    def test_au_only_row_without_directive(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\nb.png,,1+2+25\n")
        s = load_manifest(path, check_files=False).samples[0]
        assert s.expression is None
        assert s.au.present_aus() == (1, 2, 25)
        # no mask directive: validity covers exactly the listed AUs
        assert s.au.known_aus() == (1, 2, 25)

    def test_mask_directive_pins_validity(self, tmp_path):
        mask_line = "# au_mask=" + "+".join(str(a) for a in OPENFACE_AU_IDS)
        path = write_manifest(tmp_path, f"{mask_line}\npath,expression,aus\nb.png,,6+12\n")
        s = load_manifest(path, check_files=False).samples[0]
        assert s.au.present_aus() == (6, 12)
        assert s.au.known_aus() == OPENFACE_AU_IDS

    def test_directive_makes_empty_aus_a_negative_row(self, tmp_path):
        path = write_manifest(tmp_path, "# au_mask=1+2\npath,expression,aus\nb.png,,\n")
        s = load_manifest(path, check_files=False).samples[0]
        assert s.au.present_aus() == ()
        assert s.au.known_aus() == (1, 2)

    def test_both_labels_on_one_row(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\nc.png,anger,4+7\n")
        s = load_manifest(path, check_files=False).samples[0]
        assert s.expression == 0
        assert s.au.present_aus() == (4, 7)

    def test_unlabeled_row_rejected_with_row_number(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,anger,\nb.png,,\n")
        with pytest.raises(ManifestError) as exc:
            load_manifest(path, check_files=False)
        assert exc.value.row == 3

    def test_unknown_expression_rejected(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,joy,\n")
        with pytest.raises(ManifestError, match="joy"):
            load_manifest(path, check_files=False)

    def test_malformed_au_field_rejected(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,,1+x+2\n")
        with pytest.raises(ManifestError, match="malformed"):
            load_manifest(path, check_files=False)

    def test_au_outside_canonical_set_rejected(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,,28\n")
        with pytest.raises(ManifestError):
            load_manifest(path, check_files=False)

    def test_duplicate_path_rejected(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\na.png,anger,\na.png,fear,\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path, check_files=False)

    def test_wrong_header_rejected(self, tmp_path):
        path = write_manifest(tmp_path, "file,label\na.png,anger\n")
        with pytest.raises(SchemaError):
            load_manifest(path, check_files=False)

    def test_missing_file_checked(self, tmp_path):
        path = write_manifest(tmp_path, "path,expression,aus\nnope.png,anger,\n")
        with pytest.raises(ManifestError, match="missing image"):
            load_manifest(path, check_files=True)

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = write_manifest(
            tmp_path, "# a comment\n\npath,expression,aus\n\na.png,sadness,\n"
        )
        m = load_manifest(path, check_files=False)
        assert len(m.samples) == 1
        assert m.samples[0].expression == EXPRESSION_INDEX["sadness"]

    def test_emit_parse_round_trip(self, tmp_path):
        rows = [
            ("f0.png", "happiness", None),
            ("f1.png", None, AUVector.from_sets([6, 12], OPENFACE_AU_IDS)),
            ("f2.png", None, AUVector.from_sets([], OPENFACE_AU_IDS)),
        ]
        path = tmp_path / "out.csv"
        emit_manifest(path, rows, mask=OPENFACE_AU_IDS, header_comment="fixture")
        m = load_manifest(path, check_files=False)
        assert [s.expression for s in m.samples] == [3, None, None]
        assert m.samples[1].au == rows[1][2]
        assert m.samples[2].au == rows[2][2]


def write_openface(tmp_path, header, rows, name="of.csv"):
    path = tmp_path / name
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


OF_HEADER = ["frame", "confidence"] + [f"AU{a:02d}_c" for a in OPENFACE_AU_IDS] + ["AU45_c"]


class TestOpenFace:
    def test_presence_bits_extracted(self, tmp_path):
        bits = [1 if a in (6, 12, 25) else 0 for a in OPENFACE_AU_IDS]
        path = write_openface(tmp_path, OF_HEADER, [[1, 0.98] + bits + [1]])
        frames = parse_openface_csv(path)
        assert len(frames) == 1
        frame_id, vec = frames[0]
        assert frame_id == 1
        assert vec.present_aus() == (6, 12, 25)
        assert vec.known_aus() == OPENFACE_AU_IDS

    def test_unsupported_columns_ignored(self, tmp_path):
        # AU45 (blink) has no slot in the canonical set and must not leak in
        bits = [0] * 16
        path = write_openface(tmp_path, OF_HEADER, [[3, 0.9] + bits + [1]])
        _, vec = parse_openface_csv(path)[0]
        assert vec.present_aus() == ()

    def test_missing_column_rejected(self, tmp_path):
        header = [h for h in OF_HEADER if h != "AU09_c"]
        path = write_openface(tmp_path, header, [[1, 0.9] + [0] * 15 + [0]])
        with pytest.raises(SchemaError, match="AU09_c"):
            parse_openface_csv(path)

    def test_non_binary_value_rejected(self, tmp_path):
        bits = [0] * 16
        bits[2] = 0.5
        path = write_openface(tmp_path, OF_HEADER, [[1, 0.9] + bits + [0]])
        with pytest.raises(ManifestError, match="non-binary"):
            parse_openface_csv(path)

    def test_row_index_used_without_frame_column(self, tmp_path):
        header = OF_HEADER[1:]
        rows = [[0.9] + [0] * 16 + [0], [0.9] + [0] * 16 + [0]]
        path = write_openface(tmp_path, header, rows)
        assert [f for f, _ in parse_openface_csv(path)] == [1, 2]

    def test_empty_csv_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(SchemaError):
            parse_openface_csv(path)


def write_png(path, array_u8):
    Image.fromarray(array_u8, mode="RGB").save(path)


class TestDecode:
    def test_landscape_resize_and_center_crop(self, tmp_path):
        # 448x224: short edge 224 -> 112, width 224, crop the middle square
        arr = np.zeros((224, 448, 3), dtype=np.uint8)
        arr[:, 112:336] = 200  # center band survives the crop
        path = tmp_path / "wide.png"
        write_png(path, arr)
        out = decode_and_resize(path, short_edge=112)
        assert out.shape == (3, 112, 112)
        assert abs(out.mean() - 200 / 255) < 0.02

    def test_uniform_color_preserved(self, tmp_path):
        arr = np.full((64, 96, 3), 150, dtype=np.uint8)
        path = tmp_path / "flat.png"
        write_png(path, arr)
        out = decode_and_resize(path, short_edge=32)
        assert out.shape == (3, 32, 32)
        np.testing.assert_allclose(out, 150 / 255, atol=1e-12)

    def test_channel_order(self, tmp_path):
        arr = np.zeros((40, 40, 3), dtype=np.uint8)
        arr[..., 0] = 255  # pure red
        path = tmp_path / "red.png"
        write_png(path, arr)
        out = decode_and_resize(path, short_edge=16)
        np.testing.assert_allclose(out[0], 1.0)
        np.testing.assert_allclose(out[1:], 0.0)

    def test_non_rgb_rejected(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((20, 20), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(DecodeError, match="RGB"):
            decode_and_resize(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(DecodeError):
            decode_and_resize(path)

    def test_load_samples_end_to_end(self, tmp_path):
        arr = np.full((30, 30, 3), 90, dtype=np.uint8)
        write_png(tmp_path / "a.png", arr)
        write_png(tmp_path / "b.png", arr)
        manifest_text = "# au_mask=1+2\npath,expression,aus\na.png,fear,\nb.png,,1\n"
        path = write_manifest(tmp_path, manifest_text)
        loaded = load_samples(load_manifest(path), short_edge=16)
        assert len(loaded) == 2
        assert loaded[0].image.shape == (3, 16, 16)
        assert loaded[0].expression == EXPRESSION_INDEX["fear"]
        assert loaded[0].au_mask is None
        assert loaded[1].expression is None
        assert loaded[1].au_values[CANONICAL_AU_IDS.index(1)] == 1.0
        assert loaded[1].au_mask.sum() == 2
