import pytest

from kvsim.metrics import collect_metrics, delivery_series_csv, load_log, percentile, save_log


def _header(tbt=50.0, tpot=50.0, requests=1):
    return {
        "time_us": 0, "kind": "run_header", "request_id": None,
        "payload": {"policy": "orbit", "seed": 0, "tbt_ms": tbt, "tpot_ms": tpot,
                    "budget": 100, "num_layers": 4, "block_size": 16,
                    "scheduler": "fcfs", "deposit": True, "requests": requests},
    }


def _deliver(t_ms, rid, seq, gen_ms=None, burst=False):
    gen_ms = t_ms if gen_ms is None else gen_ms
    return {"time_us": int(t_ms * 1000), "kind": "deliver", "request_id": rid,
            "payload": {"seq": seq, "gen_us": int(gen_ms * 1000), "burst": burst}}


def _event(t_ms, kind, rid):
    return {"time_us": int(t_ms * 1000), "kind": kind, "request_id": rid, "payload": {}}


class TestPercentile:
    def test_nearest_rank(self):
        vals = [1.0, 2.0, 3.0, 4.0]
        assert percentile(vals, 50) == 2.0
        assert percentile(vals, 95) == 4.0
        assert percentile(vals, 100) == 4.0
        assert percentile([], 95) == 0.0


class TestCollectMetrics:
    def test_tbt_tpot_distinction(self):
        # one request, gaps {40, 60} against a 50 ms target: TBT attainment
        # 0.5 (one late token) while the request is TPOT-compliant (mean 50)
        log = [
            _header(),
            _event(0.0, "arrival", 0),
            _deliver(100.0, 0, 1),
            _deliver(140.0, 0, 2),
            _deliver(200.0, 0, 3),
            _event(200.0, "finish", 0),
        ]
        rep = collect_metrics(log)
        assert rep.tbt_attainment == 0.5
        assert rep.visible_violations == 1
        assert rep.tpot_attainment == 1.0
        assert rep.ttft_mean_ms == 100.0
        assert rep.e2e_mean_ms == 200.0

    def test_all_within_target(self):
        log = [
            _header(),
            _event(0.0, "arrival", 0),
            _deliver(10.0, 0, 1),
            _deliver(50.0, 0, 2),
            _event(50.0, "finish", 0),
        ]
        rep = collect_metrics(log)
        assert rep.tbt_attainment == 1.0
        assert rep.visible_violations == 0

    def test_throughput(self):
        log = [_header(requests=12)]
        for rid in range(12):
            log.append(_event(0.0, "arrival", rid))
            log.append(_deliver(1.0 + rid, rid, 1))
            log.append(_event(1.0 + rid, "finish", rid))
        log.append(_deliver(240_000.0, 11, 2))
        rep = collect_metrics(log)
        assert rep.throughput_rpm == pytest.approx(3.0)

    def test_empty_run(self):
        rep = collect_metrics([_header(requests=0)])
        assert rep.requests_finished == 0
        assert rep.tbt_attainment == 1.0
        assert rep.visible_violations == 0


class TestLogIO:
    def test_round_trip(self, tmp_path):
        log = [_header(), _event(0.0, "arrival", 0), _deliver(5.0, 0, 1),
               _event(5.0, "finish", 0)]
        path = tmp_path / "run.log"
        save_log(log, path)
        assert load_log(path) == log
        assert collect_metrics(load_log(path)) == collect_metrics(log)

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "run.log"
        path.write_text('{"ok": 1}\nnot json\n', encoding="utf-8")
        with pytest.raises(ValueError, match=":2"):
            load_log(path)


class TestDeliverySeries:
    def test_rows_and_gaps(self):
        log = [_header(), _deliver(10.0, 0, 1), _deliver(60.0, 0, 2, burst=True)]
        csv = delivery_series_csv(log)
        lines = csv.strip().splitlines()
        assert lines[0].startswith("request_id,")
        assert lines[1] == "0,1,10.000,10.000,,0"
        assert lines[2] == "0,2,60.000,60.000,50.000,1"
