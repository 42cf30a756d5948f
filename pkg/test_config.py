#!/usr/bin/env python3
"""
Test configuration layering: defaults, profiles, environment, config files and overrides
"""
import os
import tempfile
from unittest import mock

from config import CONFIG_KEYS, Config, ModelConfig, env_name, parse_overrides, read_config_file
from errors import ContractViolation, LoadError


def _write(directory, text):
    path = os.path.join(directory, 'run.cfg')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def test_defaults():
    cfg = Config.load()
    assert cfg['reid.rho'] == 0.7
    assert cfg['infer.max_iters'] == 4
    assert cfg['remp.attention'] is True
    assert cfg['proposals.anchor_sizes'] == (16, 32)
    assert cfg['train.frozen'] == ()
    # empty rho_expand follows rho_reid
    assert cfg.rho_expand == 0.7
    assert cfg['remp.rho_keep'] == 0.5
    assert Config.load(overrides={'remp.rho_keep': ''})['remp.rho_keep'] is None


def test_every_key_has_a_description():
    for key, (parser, _, description) in CONFIG_KEYS.items():
        assert callable(parser) and description, key


def test_reference_table_lists_every_key():
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'docs', 'CONFIG.md')
    with open(path, encoding='utf-8') as f:
        rows = [line.split('`')[1] for line in f if line.startswith('| `')]
    documented = [name for name in rows if '.' in name]
    assert documented == list(CONFIG_KEYS)


def test_env_name():
    assert env_name('reid.rho') == 'DYE_REID_RHO'
    assert env_name('train.lr_drop_interval') == 'DYE_TRAIN_LR_DROP_INTERVAL'


def test_profiles():
    assert Config.load(profile='testing')['reid.roi_m'] == 6
    assert Config.load(profile='desk')['train.lr'] == 0.01
    assert Config.load(profile='full')['reid.embed_dim'] == 256
    try:
        Config.load(profile='laptop')
        assert False, "unknown profile must fail"
    except ContractViolation:
        pass


def test_precedence_file_over_env_over_profile():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write(tmp, "# desk run\nreid.rho = 0.8  # stricter\n\nremp.attention=off\n")
        with mock.patch.dict(os.environ, {'DYE_REID_RHO': '0.6', 'DYE_REID_ROI_M': '10'}):
            cfg = Config.load(path, profile='testing')
            assert cfg['reid.rho'] == 0.8
            assert cfg['reid.roi_m'] == 10
            assert cfg['remp.attention'] is False
            cfg = Config.load(path, overrides=parse_overrides(['reid.rho=0.9']), profile='testing')
            assert cfg['reid.rho'] == 0.9


def test_config_file_errors_name_the_line():
    with tempfile.TemporaryDirectory() as tmp:
        for text, needle in (("reid.rho=0.8\nnot a pair\n", ':2:'), ("feat.colour=3\n", 'feat.colour')):
            try:
                read_config_file(_write(tmp, text))
                assert False, f"{text!r} must be rejected"
            except ContractViolation as e:
                assert needle in str(e)
        try:
            read_config_file(os.path.join(tmp, 'missing.cfg'))
            assert False, "missing file must fail"
        except LoadError:
            pass


def test_bad_values_and_unknown_override_keys():
    for pairs in (['reid.rho=high'], ['remp.attention=maybe'], ['nope.key=1'], ['reid.rho']):
        try:
            parse_overrides(pairs)
            assert False, f"{pairs} must be rejected"
        except ContractViolation:
            pass


def test_with_overrides_and_model_config():
    cfg = Config.load(profile='testing').with_overrides(reid__rho_expand='0.85', remp__hidden_dim=6)
    assert cfg.rho_expand == 0.85
    model = ModelConfig.from_config(cfg)
    assert model.hidden_dim == 6
    assert model.roi_m == 6
    assert model.feat_width == 4


def run_all():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"✅ {name}")
    print(f"\n✅ {len(tests)} config tests passed!")


if __name__ == "__main__":
    run_all()
