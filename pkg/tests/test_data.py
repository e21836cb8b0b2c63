import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sjlgm.data import (
    AdjacencyGraph,
    DataError,
    JointDataset,
    datasets_equal,
    load_dataset,
    read_graph,
    summarize_dataset,
    write_dataset,
    write_graph,
)

from conftest import make_joint


class TestAdjacencyGraph:
    def test_degrees_match_edges(self):
        g = AdjacencyGraph.from_pairs(4, [(0, 1), (1, 2), (2, 0)])
        assert_array_equal(g.neighbor_counts, [2, 2, 2, 0])
        assert g.neighbors(1) == [0, 2]

    def test_self_loop_rejected(self):
        with pytest.raises(DataError):
            AdjacencyGraph.from_pairs(2, [(1, 1)])

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            AdjacencyGraph.from_pairs(2, [(0, 2)])

    def test_symmetric_duplicates_collapse(self):
        g = AdjacencyGraph.from_pairs(2, [(0, 1), (1, 0)])
        assert g.sorted_edges() == [(0, 1)]

    def test_lattice_rook(self):
        g = AdjacencyGraph.lattice(10, 10)
        assert g.region_count == 100
        counts = g.neighbor_counts
        assert counts.min() == 2 and counts.max() == 4
        assert len(g.sorted_edges()) == 2 * 10 * 9

    def test_components_with_isolated_region(self):
        g = AdjacencyGraph.from_pairs(5, [(0, 1), (2, 3)])
        comps = sorted(sorted(c) for c in g.components())
        assert comps == [[0, 1], [2, 3], [4]]


class TestGraphFile:
    def test_neighbor_list_format(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("3\n0: 1\n1: 0 2\n2: 1\n")
        g = read_graph(p)
        assert g.sorted_edges() == [(0, 1), (1, 2)]

    def test_edge_list_format(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("3\n0 1\n2 1\n")
        assert read_graph(p).sorted_edges() == [(0, 1), (1, 2)]

    def test_bad_line_reports_line_number(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("3\n0 1\n0 x\n")
        with pytest.raises(DataError, match=":3"):
            read_graph(p)

    def test_round_trip(self, tmp_path):
        g = AdjacencyGraph.lattice(3, 4)
        write_graph(g, tmp_path / "g.txt")
        assert read_graph(tmp_path / "g.txt") == g


class TestLoadDataset:
    def test_toy_files(self, toy_files):
        d = load_dataset(*toy_files)
        assert d.n_subjects == 2
        assert d.n_regions == 2
        assert_array_equal(d.replications, [3, 2])
        assert d.subject_ids == ("A", "B")
        assert_array_equal(d.surv_event, [1, 0])
        assert len(d.longitudinal) == 5
        assert d.survival[1].subject_id == "B"

    def test_missing_survival_subject_named(self, toy_files):
        long, surv, graph = toy_files
        surv.write_text("subject,region,time,event,x1\nA,0,3.0,1,0.3\n")
        with pytest.raises(DataError, match="subject B"):
            load_dataset(long, surv, graph)

    def test_missing_longitudinal_subject_named(self, toy_files):
        long, surv, graph = toy_files
        long.write_text("subject,region,time,y,x1\nA,0,0.0,1.5,0.3\n")
        with pytest.raises(DataError, match="subject B"):
            load_dataset(long, surv, graph)

    def test_time_after_survival_rejected_citing_record(self, toy_files):
        long, surv, graph = toy_files
        surv.write_text("subject,region,time,event,x1\nA,0,4.0,1,0.3\nB,1,2.5,0,-1.0\n")
        long.write_text(
            "subject,region,time,y,x1\nA,0,0.0,1.5,0.3\nA,0,5.0,1.2,0.3\nB,1,0.0,2.1,-1.0\n"
        )
        with pytest.raises(DataError, match=r"long\.csv:3.*time 5\.0.*A"):
            load_dataset(long, surv, graph)

    def test_clamp_instead_of_reject(self, toy_files):
        long, surv, graph = toy_files
        long.write_text(
            "subject,region,time,y,x1\nA,0,0.0,1.5,0.3\nA,0,5.0,1.2,0.3\nB,1,0.0,2.1,-1.0\n"
        )
        d = load_dataset(long, surv, graph, clamp=True)
        assert d.long_time.max() < 3.0

    def test_time_equal_survival_warns_or_rejects(self, toy_files, caplog):
        long, surv, graph = toy_files
        long.write_text("subject,region,time,y,x1\nA,0,3.0,1.5,0.3\nB,1,0.0,2.1,-1.0\n")
        d = load_dataset(long, surv, graph)
        assert d.n_obs == 2
        assert "equal the survival time" in caplog.text
        with pytest.raises(DataError):
            load_dataset(long, surv, graph, strict=True)

    def test_region_out_of_range(self, toy_files):
        long, surv, graph = toy_files
        surv.write_text("subject,region,time,event,x1\nA,0,3.0,1,0.3\nB,5,2.5,0,-1.0\n")
        with pytest.raises(DataError, match="region 5"):
            load_dataset(long, surv, graph)

    def test_parse_error_line_number(self, toy_files):
        long, surv, graph = toy_files
        surv.write_text("subject,region,time,event,x1\nA,0,3.0,1,0.3\nB,1,abc,0,-1.0\n")
        with pytest.raises(DataError, match="surv.csv:3"):
            load_dataset(long, surv, graph)

    def test_covariate_selection(self, toy_files):
        d = load_dataset(*toy_files, long_covariates=[], surv_covariates=["x1"])
        assert d.long_covariate_names == ()
        assert d.surv_covariate_names == ("x1",)


class TestDatasetInvariants:
    def test_arrays_read_only(self):
        d = make_joint(0)
        with pytest.raises(ValueError):
            d.long_y[0] = 1.0

    def test_round_trip(self, tmp_path):
        d = make_joint(1)
        paths = [tmp_path / n for n in ("l.csv", "s.csv", "g.txt")]
        write_dataset(d, *paths)
        assert datasets_equal(load_dataset(*paths), d)

    def test_row_permutation_same_summary(self, tmp_path):
        d = make_joint(2)
        paths = [tmp_path / n for n in ("l.csv", "s.csv", "g.txt")]
        write_dataset(d, *paths)
        lines = paths[0].read_text().splitlines()
        rng = np.random.default_rng(0)
        body = [lines[i + 1] for i in rng.permutation(len(lines) - 1)]
        paths[0].write_text("\n".join([lines[0]] + body) + "\n")
        d2 = load_dataset(*paths)
        assert summarize_dataset(d2) == summarize_dataset(d)

    def test_longitudinal_only_dataset(self):
        g = AdjacencyGraph.lattice(1, 1)
        d = JointDataset.from_arrays(["a", "b"], [0, 0], g, long_subject=[0, 1], long_time=[0.0, 0.5], long_y=[1.0, 2.0])
        assert d.has_longitudinal and not d.has_survival

    def test_subject_without_measurements_rejected(self):
        g = AdjacencyGraph.lattice(1, 1)
        with pytest.raises(DataError, match="subject b"):
            JointDataset.from_arrays(["a", "b"], [0, 0], g, long_subject=[0], long_time=[0.0], long_y=[1.0],
                                     surv_time=[1.0, 1.0], surv_event=[1, 0])


class TestSummarize:
    def _dataset(self, N, events, rows):
        g = AdjacencyGraph.lattice(1, 1)
        subj = np.concatenate([np.arange(N), np.arange(rows - N) % N])
        ev = np.zeros(N, dtype=int)
        ev[:events] = 1
        return JointDataset.from_arrays(
            [f"s{i}" for i in range(N)], np.zeros(N, dtype=int), g,
            long_subject=np.sort(subj), long_time=np.zeros(rows), long_y=np.zeros(rows),
            surv_time=np.ones(N), surv_event=ev,
        )

    def test_application_counts(self):
        s = summarize_dataset(self._dataset(500, 34, 2757))
        assert_allclose(s.censoring_rate, 0.932)
        assert_allclose(s.mean_replications, 5.514)
        assert s.n_events == 34

    def test_all_events(self):
        assert summarize_dataset(self._dataset(10, 10, 10)).censoring_rate == 0.0

    def test_region_counts_and_empty_regions(self):
        g = AdjacencyGraph.lattice(1, 3)
        d = JointDataset.from_arrays(["a", "b", "c"], [0, 0, 2], g, long_subject=[0, 1, 2],
                                     long_time=[0, 0, 0], long_y=[0, 0, 0])
        s = summarize_dataset(d)
        assert s.empty_regions == 1
        assert_allclose(s.subjects_per_region_mean, 1.0)
        assert_allclose(s.subjects_per_region_sd, 1.0)
