import numpy as np
import pytest

from heatmap_viewer.matrices import (
    MatrixSet,
    ParseError,
    find_exports,
    load_matrix,
    parse_name,
)


def write_csv(path, grid):
    grid = np.asarray(grid)
    n, m = grid.shape
    lines = ["," + ",".join(str(i + 1) for i in range(m))]
    for j in range(n):
        lines.append(f"{j + 1}," + ",".join(repr(float(v)) for v in grid[j]))
    path.write_text("\n".join(lines) + "\n")
    return path


class TestParseName:
    def test_roundtrip(self):
        assert parse_name("epoch12_attn_flow.csv") == (12, "attn", "flow")
        assert parse_name("/a/b/epoch3_hidden_cost.csv") == (3, "hidden", "cost")

    def test_rejects_other_names(self):
        with pytest.raises(ParseError):
            parse_name("metrics.jsonl")


class TestLoadMatrix:
    def test_values_and_metadata(self, tmp_path):
        grid = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]
        path = write_csv(tmp_path / "epoch4_attn_flow.csv", grid)
        ms = load_matrix(path)
        assert (ms.kind, ms.target, ms.epoch) == ("flow", "attn", 4)
        assert ms.num_students == 2 and ms.num_teachers == 3
        assert np.array_equal(ms.values, grid)

    def test_one_based_cell_lookup(self, tmp_path):
        grid = np.arange(6, dtype=float).reshape(2, 3)
        ms = load_matrix(write_csv(tmp_path / "epoch1_hidden_cost.csv", grid))
        for student in (1, 2):
            for teacher in (1, 2, 3):
                assert ms.value(student, teacher) == grid[student - 1, teacher - 1]

    def test_explicit_metadata_for_unnamed_file(self, tmp_path):
        path = write_csv(tmp_path / "whatever.csv", [[1.0]])
        ms = load_matrix(path, kind="cost", target="attn", epoch=9)
        assert ms.epoch == 9
        with pytest.raises(ParseError, match="cannot infer"):
            load_matrix(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "epoch1_attn_flow.csv"
        path.write_text(",1,2\n1,0.5,0.5\n2,0.25\n")
        with pytest.raises(ParseError, match="line 3"):
            load_matrix(path)

    def test_non_numeric_cell_names_line(self, tmp_path):
        path = tmp_path / "epoch1_attn_flow.csv"
        path.write_text(",1\n1,oops\n")
        with pytest.raises(ParseError, match="line 2.*'oops'"):
            load_matrix(path)

    def test_bad_header_labels(self, tmp_path):
        path = tmp_path / "epoch1_attn_flow.csv"
        path.write_text(",1,3\n1,0.5,0.5\n")
        with pytest.raises(ParseError, match="line 1"):
            load_matrix(path)

    def test_negative_flow_rejected(self, tmp_path):
        path = write_csv(tmp_path / "epoch1_attn_flow.csv", [[-0.1]])
        with pytest.raises(ParseError, match="negative"):
            load_matrix(path)
        # negative costs are fine for other kinds
        load_matrix(write_csv(tmp_path / "epoch1_attn_cost.csv", [[-0.1]]))

    def test_matrixset_validates_kind(self):
        with pytest.raises(ParseError):
            MatrixSet("blend", "attn", 1, np.ones((1, 1)))


class TestFindExports:
    def test_sorted_and_filtered(self, tmp_path):
        names = ["epoch2_attn_flow.csv", "epoch1_attn_flow.csv",
                 "epoch1_hidden_cost.csv"]
        for name in names:
            write_csv(tmp_path / name, [[1.0]])
        (tmp_path / "metrics.jsonl").write_text("{}\n")
        found = [p.name for p in find_exports(tmp_path)]
        assert found == ["epoch1_attn_flow.csv", "epoch2_attn_flow.csv",
                         "epoch1_hidden_cost.csv"]

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ParseError):
            find_exports(tmp_path)
