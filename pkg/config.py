import os

_ROOT = os.path.dirname(os.path.abspath(__file__))


class Config:
    PRESETS_PATH = os.environ.get('SIM_PRESETS_PATH') or os.path.join(_ROOT, 'config', 'scenarios.yaml')
    OUTPUT_DIR = os.environ.get('SIM_OUTPUT_DIR') or 'results'
    LOG_LEVEL = (os.environ.get('SIM_LOG_LEVEL') or 'INFO').upper()
    WORKERS = int(os.environ.get('SIM_WORKERS') or 1)
    DEFAULT_SEED = 1
    PRESET_NAMES = ('default', 'random', 'ue_aware', 'data_aware')
