import json
import os
import shutil
import tempfile
import unittest

from specreg.errors import ConfigError, RegionFileError, UsageError
from specreg.models import Measure, OptimizerConfig, OptimizerTrace, RegistrationConfig, SimilarityConfig, TraceEntry
from specreg.utils import load_config_file, parse_regions, read_trace_csv, slugify, write_json, write_trace_csv


class HelperTestCase(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        """Tear down test fixtures after each test method."""
        shutil.rmtree(self.tmp)

    def _write(self, name, text):
        path = os.path.join(self.tmp, name)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(text)
        return path

    def test_parse_regions(self):
        """Test region names may contain spaces and comments are skipped."""
        regions = parse_regions('# header\nFull area 0 0 512 512\n\nHigh details 10 20 30 40\n')
        self.assertEqual([r.name for r in regions], ['Full area', 'High details'])
        self.assertEqual(regions[1].rect, (10, 20, 30, 40))

    def test_parse_regions_errors(self):
        """Test malformed lines name their line number."""
        with self.assertRaisesRegex(RegionFileError, 'line 3'):
            parse_regions('a 0 0 1 1\n\nb 0 0 x 1\n')
        with self.assertRaisesRegex(RegionFileError, 'line 1'):
            parse_regions('negative 0 0 -4 4\n')
        with self.assertRaises(RegionFileError):
            parse_regions('# nothing here\n')

    def test_load_config_file(self):
        """Test key = value files load as strings and gaps are reported."""
        path = self._write('run.cfg', '# comment\nmeasure = rc\nmax_iters = 50\n')
        self.assertEqual(load_config_file(path), {'measure': 'rc', 'max_iters': '50'})
        with self.assertRaises(ConfigError):
            load_config_file(self._write('gap.cfg', 'measure\n'))
        with self.assertRaises(UsageError):
            load_config_file(os.path.join(self.tmp, 'missing.cfg'))

    def test_config_overrides(self):
        """Test flat overrides reach the nested configuration."""
        cfg = RegistrationConfig().with_overrides({
            'measure': 'NMI', 'bins': '32', 'max_iters': '10', 'pyramid_levels': 2,
            'prereg_enabled': 'off', 'moving_channel': '1', 'coarse_spacing': '48',
        })
        self.assertEqual(cfg.similarity, SimilarityConfig(measure=Measure.NMI, bins=32))
        self.assertEqual(cfg.optimizer, OptimizerConfig(max_iters=10, pyramid_levels=2))
        self.assertFalse(cfg.prereg_enabled)
        self.assertEqual(cfg.moving_channel, 1)
        self.assertEqual(cfg.coarse_spacing, 48.0)
        self.assertEqual(cfg.to_dict()['similarity']['measure'], 'nmi')

    def test_config_override_errors(self):
        """Test unknown keys and unparsable values are configuration errors."""
        for values in ({'colour': 'red'}, {'max_iters': 'many'}, {'measure': 'ncc'}, {'prereg_enabled': 'maybe'},
                       {'bins': '1'}, {'backtrack_factor': '1.5'}):
            with self.assertRaises(ConfigError, msg=str(values)):
                RegistrationConfig().with_overrides(values)

    def test_trace_csv(self):
        """Test trace rows survive a CSV round trip in run order."""
        trace = OptimizerTrace()
        trace.start_level(1).entries.extend([TraceEntry(0, 2.5, 0.0, 1.0), TraceEntry(1, 1.25, 0.5, 0.1)])
        trace.start_level(0).entries.append(TraceEntry(0, 1.0, 0.0, 0.3))
        path = write_trace_csv(os.path.join(self.tmp, 'trace.csv'), trace)
        rows = read_trace_csv(path)
        self.assertEqual([(r['iteration'], r['level'], r['objective']) for r in rows],
                         [(0, 1, 2.5), (1, 1, 1.25), (0, 0, 1.0)])
        with open(path, 'r', encoding='utf-8') as handle:
            self.assertEqual(handle.readline().strip(), 'iteration,level,objective,step,grad_norm')

    def test_write_json(self):
        """Test JSON reports are written with sorted keys."""
        path = write_json(os.path.join(self.tmp, 'nested', 'report.json'), {'b': 1, 'a': [1.5]})
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
        self.assertEqual(json.loads(text), {'a': [1.5], 'b': 1})
        self.assertLess(text.index('"a"'), text.index('"b"'))

    def test_slugify(self):
        """Test region names become file-name fragments."""
        self.assertEqual(slugify('High details'), 'high_details')
        self.assertEqual(slugify('  Low -- details! '), 'low_details')
        self.assertEqual(slugify('***'), 'region')


if __name__ == '__main__':
    unittest.main()
