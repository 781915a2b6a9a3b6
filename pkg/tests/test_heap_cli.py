import json
import os

import numpy as np
import pandas as pd
import pytest

from core import heap_cli
from core.heap_cli import config_hash, ingest_csv, load_config, main
from core.heap_errors import DomainError, IngestionError, SamplerAbort, TruncationError
from core.heap_report import HeapParams, reporting_pmf


def write_csv(path, text):
    path.write_text(text)
    return str(path)


class TestIngestion:

    def test_two_rows(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv', "subject_id,time_index,y\nA,0,10\nB,0,15\n")
        data = ingest_csv(path)
        assert data.n_obs == 2 and data.n_subjects == 2
        assert data.y.tolist() == [10, 15]
        assert list(data.subject_ids) == ['A', 'B']

    def test_negative_report_names_row_and_column(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv', "subject_id,time_index,y\n1,0,4\n1,1,-1\n")
        with pytest.raises(IngestionError) as info:
            ingest_csv(path)
        assert info.value.row == 3
        assert info.value.column == 'y'

    def test_non_integer_report(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv', "subject_id,time_index,y\n1,0,4.5\n")
        with pytest.raises(IngestionError) as info:
            ingest_csv(path)
        assert info.value.row == 2

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv', "subject_id,y\n1,4\n")
        with pytest.raises(IngestionError) as info:
            ingest_csv(path)
        assert info.value.column == 'time_index'

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            ingest_csv(str(tmp_path / 'absent.csv'))

    def test_covariate_routing(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv',
                         "subject_id,time_index,y,w_age,h_gender\n"
                         "1,0,4,30,1\n1,1,5,31,1\n2,0,8,50,0\n2,1,9,52,0\n")
        data = ingest_csv(path)
        assert data.w_names == ['intercept', 'age']
        assert data.h_names == ['intercept', 'gender']
        assert data.W[:, 1].mean() == pytest.approx(0.0, abs=1e-12)
        assert data.H.tolist() == [[1.0, 1.0], [1.0, 0.0]]

    def test_heaping_covariate_must_be_constant(self, tmp_path):
        path = write_csv(tmp_path / 'panel.csv',
                         "subject_id,time_index,y,h_gender\n1,0,4,1\n1,1,5,0\n")
        with pytest.raises(IngestionError) as info:
            ingest_csv(path)
        assert info.value.column == 'h_gender'


class TestConfig:

    def test_unknown_section(self, tmp_path):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'plots': {}}))
        with pytest.raises(DomainError):
            load_config(str(path))

    def test_hash_is_key_order_free(self):
        assert config_hash({'a': 1, 'b': [1, 2]}) == config_hash({'b': [1, 2], 'a': 1})
        assert config_hash({'a': 1}) != config_hash({'a': 2})


class TestCommands:

    @pytest.fixture
    def panel(self, tmp_path):
        path = str(tmp_path / 'sim.csv')
        assert main(['simulate', '--out', path, '--subjects', '3', '--repeats', '2',
                     '--seed', '1']) == 0
        return path

    def fit_args(self, panel, out, *extra):
        return ['fit', '--data', panel, '--variant', 'no-heaping', '--iterations', '12',
                '--burn-in', '2', '--thin', '5', '--out', out, *extra]

    def test_simulate_writes_truth(self, panel):
        frame = pd.read_csv(panel)
        assert list(frame.columns[:3]) == ['subject_id', 'time_index', 'y']
        assert len(frame) == 6
        with open(os.path.splitext(panel)[0] + '.truth.json') as fh:
            sidecar = json.load(fh)
        assert sidecar['simulation']['n_subjects'] == 3

    def test_fit_and_diagnose(self, panel, tmp_path, capsys):
        out = str(tmp_path / 'run')
        assert main(self.fit_args(panel, out, '--seed', '3')) == 0
        with open(os.path.join(out, 'manifest.json')) as fh:
            manifest = json.load(fh)
        assert manifest['chain_seeds'] == [3]
        assert 'chain-0.ndjson' in manifest['files']
        assert 'FIT REPORT: no-heaping' in capsys.readouterr().out
        assert main(['diagnose', out]) == 0
        assert os.path.exists(os.path.join(out, 'traces.csv'))

    def test_config_mismatch_refused(self, panel, tmp_path, capsys):
        out = str(tmp_path / 'run')
        assert main(self.fit_args(panel, out, '--seed', '3')) == 0
        assert main(self.fit_args(panel, out, '--seed', '4')) == 2
        assert 'Refusing' in capsys.readouterr().err
        assert main(self.fit_args(panel, out, '--seed', '4', '--force')) == 0

    def test_pmf(self, tmp_path):
        out = str(tmp_path / 'pmf.csv')
        assert main(['pmf', '--theta-disp', '0.5', '--theta-heap', '2', '--x', '7',
                     '--max-y', '20', '--rates', '--out', out]) == 0
        frame = pd.read_csv(out)
        assert len(frame) == 21
        assert list(frame.columns) == ['y', 'probability', 'birth', 'death']
        expected = reporting_pmf(HeapParams.single_grid(0.5, 2.0, 5), 7, max_y=20)[:21]
        assert np.max(np.abs(frame['probability'].to_numpy() - expected)) < 1e-9
        assert frame.loc[5, 'probability'] > frame.loc[4, 'probability']

    def test_pmf_needs_gamma_for_several_grids(self, capsys):
        code = main(['pmf', '--theta-disp', '0.5', '--x', '7', '--max-y', '20',
                     '--grids', '5', '10'])
        assert code == 2
        assert '--gamma' in capsys.readouterr().err

    def test_bad_data_exit_code(self, tmp_path):
        assert main(['fit', '--data', str(tmp_path / 'absent.csv'), '--out',
                     str(tmp_path / 'run')]) == 2

    def test_sampler_abort_exit_code(self, panel, tmp_path, monkeypatch):
        def abort(*args, **kwargs):
            raise SamplerAbort("alpha update failed", '/tmp/dump.json')

        monkeypatch.setattr(heap_cli, 'run_chains', abort)
        assert main(self.fit_args(panel, str(tmp_path / 'run'))) == 3

    def test_other_failures_exit_one(self, monkeypatch):
        def fail(*args, **kwargs):
            raise TruncationError("cap exhausted")

        monkeypatch.setattr(heap_cli, 'reporting_pmf', fail)
        assert main(['pmf', '--theta-disp', '0.5', '--x', '7', '--max-y', '20']) == 1
