"""Configuration management for Stoch-Future"""

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from stoch_future.errors import ConfigError
from stoch_future.models import (BEVWorldConfig, EgoWorldConfig, SpriteWorldConfig,
                                 ToyWorldConfig)

MODEL_KINDS = (
    'svg', 'slamp', 'slamp-baseline',
    'slamp3d-depthonly', 'slamp3d-combined', 'slamp3d-conditional',
    'srvp', 'srvp++-direct', 'srvp++-mask',
    'stretchbev', 'stretchbev-p', 'stretchbev-global',
)

# model kind -> worlds it can be trained on
MODEL_WORLDS = {
    'svg': ('sprites', 'ego'),
    'slamp': ('sprites', 'ego'),
    'slamp-baseline': ('sprites', 'ego'),
    'slamp3d-depthonly': ('ego',),
    'slamp3d-combined': ('ego',),
    'slamp3d-conditional': ('ego',),
    'srvp': ('sprites', 'ego', 'toy'),
    'srvp++-direct': ('sprites', 'ego'),
    'srvp++-mask': ('sprites', 'ego'),
    'stretchbev': ('bev',),
    'stretchbev-p': ('bev',),
    'stretchbev-global': ('bev',),
}

# world kind -> (k, train horizon, eval horizon)
PROTOCOLS = {
    'sprites': (5, 10, 20),
    'ego': (10, 10, 20),
    'bev': (3, 8, 12),
    'toy': (3, 9, 9),
}

BEV_HORIZONS = {'short': 4, 'mid': 8, 'long': 12}


class ConfigManager:
    """Manages run configuration from .ini files"""

    DEFAULT_CONFIG = {
        'Run': {
            'model_kind': 'slamp',
            'world_kind': 'sprites',
            'seed': '0',
            'n_sequences': '16',
            'workers': '1',
        },
        'World': {
            'sprite_size_px': '32',
            'sprite_count': '2',
            'sprite_side': '6',
            'sprite_speed': '1.0, 3.0',
            'sprite_length': '30',
            'ego_height': '48',
            'ego_width': '32',
            'ego_focal': '24.0',
            'ego_speed': '0.0, 0.25',
            'ego_yaw_rate': '0.01',
            'box_speed': '0.0, 0.2',
            'ego_length': '30',
            'bev_size': '48',
            'bev_agents': '3',
            'bev_agent_size': '3, 5',
            'bev_speed': '0.5, 1.5',
            'bev_turn_rate': '0.1',
            'bev_length': '16',
            'toy_state_dim': '2',
            'toy_observation_dim': '4',
            'toy_noise_std': '0.1',
            'toy_length': '12',
        },
        'Model': {
            'latent_dim': '16',
            'hidden_dim': '64',
            'feature_dim': '64',
            'base_channels': '8',
            'beta': '0.0001',
            'fixed_prior': 'False',
            'kl_samples': '1',
            'state_dim': '32',
            'state_channels': '32',
            'latent_channels': '8',
            'dt': '1.0',
            'substeps': '1',
            'content': 'auto',
            'sigma2_min': '0.000001',
        },
        'Training': {
            'steps': '2000',
            'batch_size': '4',
            'learning_rate': '0.001',
            'finetune_lr_scale': '0.1',
            'pretrain_steps': '0',
            'checkpoint_every': '500',
            'log_every': '50',
            'precision': '32',
        },
        'Evaluation': {
            'k': 'auto',
            'train_horizon': 'auto',
            'eval_horizon': 'auto',
            'n_samples': '10',
            'near_fraction': '0.3',
            'peak_threshold': '0.1',
            'peak_separation': '2',
            'match_radius': '3',
            'seg_weight': '1.0',
            'center_weight': '1.0',
            'offset_weight': '0.5',
            'flow_weight': '0.5',
        },
        'Logging': {
            'log_level': 'INFO',
            'log_directory': './Logs',
            'log_filename_format': 'Stoch-Future_%Y%m%d-%H-%M.log',
        },
        'Output': {
            'output_directory': './Runs',
            'export_workbook': 'True',
        },
    }

    def __init__(self, config_path: str = 'Stoch-Future.ini'):
        """
        Initialize ConfigManager

        Args:
            config_path: Path to configuration file
        """
        self.config_path = Path(config_path)
        self.config = configparser.ConfigParser(interpolation=None)
        self.config.optionxform = str

        if not self.config_path.exists():
            self.create_default_config()

        self.load_config()

    def create_default_config(self) -> None:
        """Create default configuration file with all options"""
        config = configparser.ConfigParser(interpolation=None)
        config.optionxform = str

        for section, options in self.DEFAULT_CONFIG.items():
            config.add_section(section)
            for key, value in options.items():
                config.set(section, key, value)

        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, 'w', encoding='utf-8') as f:
            f.write('# Stoch-Future Configuration File\n')
            f.write('# All configurable options are listed below\n')
            f.write('# Ranges are written as "low, high"; "auto" picks the world protocol\n\n')
            config.write(f)

    def load_config(self) -> dict:
        """
        Load configuration from file and reject unknown sections or keys

        Returns:
            Dictionary containing configuration
        """
        try:
            self.config.read(self.config_path, encoding='utf-8')
        except configparser.Error as e:
            raise ConfigError(f"Failed to parse {self.config_path}: {e}") from e

        for section in self.config.sections():
            if section not in self.DEFAULT_CONFIG:
                raise ConfigError(f"Unknown config section: [{section}]")
            for key in self.config.options(section):
                if key not in self.DEFAULT_CONFIG[section]:
                    raise ConfigError(f"Unknown config key: {section}.{key}")

        return {section: dict(self.config.items(section))
                for section in self.config.sections()}

    def raw(self, section: str, key: str) -> str:
        """Configured string value, falling back to the built-in default"""
        if self.config.has_option(section, key):
            return self.config.get(section, key).strip()
        try:
            return self.DEFAULT_CONFIG[section][key]
        except KeyError:
            raise ConfigError(f"Unknown config key: {section}.{key}") from None

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """
        Get configuration value

        Args:
            section: Configuration section
            key: Configuration key
            default: Default value if not found

        Returns:
            Configuration value or default
        """
        try:
            value = self.config.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            if section in self.DEFAULT_CONFIG and key in self.DEFAULT_CONFIG[section]:
                value = self.DEFAULT_CONFIG[section][key]
            else:
                return default
        return convert_value(value)

    def validate_config(self) -> bool:
        """
        Validate configuration values

        Returns:
            True if configuration is valid
        """
        valid = True

        model_kind = self.get('Run', 'model_kind')
        if model_kind not in MODEL_KINDS:
            print(f"[WARN] Invalid model_kind: {model_kind}")
            valid = False

        world_kind = self.get('Run', 'world_kind')
        if world_kind not in PROTOCOLS:
            print(f"[WARN] Invalid world_kind: {world_kind}")
            valid = False

        for section, key in (('Run', 'n_sequences'), ('Training', 'batch_size'),
                             ('Evaluation', 'n_samples'), ('Model', 'substeps')):
            value = self.get(section, key)
            if not isinstance(value, int) or value < 1:
                print(f"[WARN] Invalid {key}: {value}. Must be a positive integer")
                valid = False

        precision = self.get('Training', 'precision')
        if precision not in (32, 64):
            print(f"[WARN] Invalid precision: {precision}. Use 32 or 64")
            valid = False

        output_dir = self.get('Output', 'output_directory', './Runs')
        log_dir = self.get('Logging', 'log_directory', './Logs')

        try:
            Path(str(output_dir)).mkdir(parents=True, exist_ok=True)
            Path(str(log_dir)).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            print(f"[WARN] Failed to create directories: {exc}")
            valid = False

        return valid


def convert_value(value: str) -> Any:
    """Convert exact boolean words and numeric strings; everything else stays text"""
    text = value.strip()
    lowered = text.lower()
    if lowered in ('true', 'yes'):
        return True
    if lowered in ('false', 'no'):
        return False
    if text.lstrip('-').isdigit():
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def parse_range(text: str, cast=float) -> Tuple:
    """Parse a "low, high" pair"""
    parts = [p.strip() for p in str(text).split(',')]
    if len(parts) != 2:
        raise ConfigError(f"Expected 'low, high', got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError as e:
        raise ConfigError(f"Invalid range {text!r}: {e}") from e


@dataclass
class RunConfig:
    """Resolved, validated settings for one run"""
    model_kind: str
    world_kind: str
    seed: int
    n_sequences: int
    workers: int
    world: Any
    k: int
    train_horizon: int
    eval_horizon: int
    latent_dim: int = 16
    hidden_dim: int = 64
    feature_dim: int = 64
    base_channels: int = 8
    beta: float = 1e-4
    fixed_prior: bool = False
    kl_samples: int = 1
    state_dim: int = 32
    state_channels: int = 32
    latent_channels: int = 8
    dt: float = 1.0
    substeps: int = 1
    use_content: bool = True
    sigma2_min: float = 1e-6
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    finetune_lr_scale: float = 0.1
    pretrain_steps: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    precision: int = 32
    n_samples: int = 10
    near_fraction: float = 0.3
    peak_threshold: float = 0.1
    peak_separation: int = 2
    match_radius: float = 3.0
    label_weights: Dict[str, float] = field(default_factory=dict)
    log_level: str = 'INFO'
    log_directory: str = './Logs'
    log_filename_format: str = 'Stoch-Future_%Y%m%d-%H-%M.log'
    output_directory: str = './Runs'
    export_workbook: bool = True
    entries: Dict[str, str] = field(default_factory=dict, repr=False)

    @classmethod
    def from_manager(cls, manager: ConfigManager,
                     overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Resolve a ConfigManager into a RunConfig

        Args:
            manager: Loaded configuration
            overrides: CLI overrides keyed by 'seed', 'n_samples', 'horizon'

        Returns:
            RunConfig

        Raises:
            ConfigError: invalid values or incompatible model/world settings
        """
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        entries = {f'{section}.{key}': manager.raw(section, key)
                   for section, options in manager.DEFAULT_CONFIG.items()
                   for key in options}
        if 'seed' in overrides:
            entries['Run.seed'] = str(overrides['seed'])
        if 'n_samples' in overrides:
            entries['Evaluation.n_samples'] = str(overrides['n_samples'])
        if 'horizon' in overrides:
            entries['Evaluation.eval_horizon'] = str(overrides['horizon'])

        def value(name: str, kind=None):
            text = entries[name]
            converted = convert_value(text)
            if kind is None:
                return converted
            if kind is bool:
                if not isinstance(converted, bool):
                    raise ConfigError(f"{name} must be True or False, got {text!r}")
                return converted
            if kind is int and (isinstance(converted, bool) or not isinstance(converted, int)):
                raise ConfigError(f"{name} must be an integer, got {text!r}")
            if kind is float and isinstance(converted, bool):
                raise ConfigError(f"{name} must be float, got {text!r}")
            try:
                return kind(converted)
            except (TypeError, ValueError):
                raise ConfigError(f"{name} must be {kind.__name__}, got {text!r}") from None

        model_kind = value('Run.model_kind', str)
        world_kind = value('Run.world_kind', str)
        if model_kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model_kind: {model_kind}")
        if world_kind not in PROTOCOLS:
            raise ConfigError(f"Unknown world_kind: {world_kind}")
        if world_kind not in MODEL_WORLDS[model_kind]:
            raise ConfigError(f"Model {model_kind} cannot be used with the {world_kind} world "
                              f"(supported: {', '.join(MODEL_WORLDS[model_kind])})")

        protocol_k, protocol_train, protocol_eval = PROTOCOLS[world_kind]

        def protocol(name: str, fallback: int) -> int:
            return fallback if entries[name].lower() == 'auto' else value(name, int)

        k = protocol('Evaluation.k', protocol_k)
        train_horizon = protocol('Evaluation.train_horizon', protocol_train)
        eval_horizon = protocol('Evaluation.eval_horizon', protocol_eval)
        if model_kind.startswith(('slamp', 'svg')) and k < 2:
            raise ConfigError(f"{model_kind} needs at least 2 conditioning frames, got k={k}")
        if k < 1 or train_horizon < 1 or eval_horizon < 1:
            raise ConfigError("k and horizons must be positive")

        content = entries['Model.content'].lower()
        is_bev = model_kind.startswith('stretchbev')
        if content == 'auto':
            use_content = not is_bev and world_kind != 'toy'
        else:
            use_content = value('Model.content', bool)
        if is_bev and use_content:
            raise ConfigError("StretchBEV models do not take a content network")

        world = build_world_config(world_kind, value)
        length = world.length
        if k + max(train_horizon, eval_horizon) > length:
            raise ConfigError(f"k + horizon ({k} + {max(train_horizon, eval_horizon)}) exceeds "
                              f"sequence length {length}")

        precision = value('Training.precision', int)
        if precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {precision}")
        for name in ('Run.n_sequences', 'Training.batch_size', 'Evaluation.n_samples',
                     'Model.substeps', 'Model.kl_samples', 'Run.workers'):
            if value(name, int) < 1:
                raise ConfigError(f"{name} must be at least 1")

        return cls(
            model_kind=model_kind,
            world_kind=world_kind,
            seed=value('Run.seed', int),
            n_sequences=value('Run.n_sequences', int),
            workers=value('Run.workers', int),
            world=world,
            k=k,
            train_horizon=train_horizon,
            eval_horizon=eval_horizon,
            latent_dim=value('Model.latent_dim', int),
            hidden_dim=value('Model.hidden_dim', int),
            feature_dim=value('Model.feature_dim', int),
            base_channels=value('Model.base_channels', int),
            beta=value('Model.beta', float),
            fixed_prior=value('Model.fixed_prior', bool),
            kl_samples=value('Model.kl_samples', int),
            state_dim=value('Model.state_dim', int),
            state_channels=value('Model.state_channels', int),
            latent_channels=value('Model.latent_channels', int),
            dt=value('Model.dt', float),
            substeps=value('Model.substeps', int),
            use_content=use_content,
            sigma2_min=value('Model.sigma2_min', float),
            steps=value('Training.steps', int),
            batch_size=value('Training.batch_size', int),
            learning_rate=value('Training.learning_rate', float),
            finetune_lr_scale=value('Training.finetune_lr_scale', float),
            pretrain_steps=value('Training.pretrain_steps', int),
            checkpoint_every=value('Training.checkpoint_every', int),
            log_every=value('Training.log_every', int),
            precision=precision,
            n_samples=value('Evaluation.n_samples', int),
            near_fraction=value('Evaluation.near_fraction', float),
            peak_threshold=value('Evaluation.peak_threshold', float),
            peak_separation=value('Evaluation.peak_separation', int),
            match_radius=value('Evaluation.match_radius', float),
            label_weights={
                'seg': value('Evaluation.seg_weight', float),
                'center': value('Evaluation.center_weight', float),
                'offset': value('Evaluation.offset_weight', float),
                'flow': value('Evaluation.flow_weight', float),
            },
            log_level=value('Logging.log_level', str),
            log_directory=value('Logging.log_directory', str),
            log_filename_format=value('Logging.log_filename_format', str),
            output_directory=value('Output.output_directory', str),
            export_workbook=value('Output.export_workbook', bool),
            entries=entries,
        )

    def canonical_text(self) -> str:
        """Sorted ``section.key = value`` lines of every effective setting"""
        return ''.join(f'{name} = {self.entries[name]}\n' for name in sorted(self.entries))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode('utf-8')).hexdigest()

    def world_hash(self) -> str:
        """Hash over the settings that determine a generated dataset"""
        names = ['Run.world_kind', 'Run.seed', 'Run.n_sequences']
        names += sorted(n for n in self.entries if n.startswith('World.'))
        text = ''.join(f'{n} = {self.entries[n]}\n' for n in names)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    @property
    def horizons(self) -> Dict[str, int]:
        """Named evaluation horizons (short/mid/long for BEV)"""
        if self.world_kind == 'bev':
            return {name: h for name, h in BEV_HORIZONS.items() if h <= self.eval_horizon}
        return {'full': self.eval_horizon}


def build_world_config(world_kind: str, value) -> Any:
    """Build the world dataclass from ``World.*`` entries"""
    if world_kind == 'sprites':
        size = value('World.sprite_size_px', int)
        config = SpriteWorldConfig(height=size, width=size,
                                   sprite_count=value('World.sprite_count', int),
                                   sprite_size=value('World.sprite_side', int),
                                   speed_range=parse_range(value('World.sprite_speed', str)),
                                   length=value('World.sprite_length', int))
    elif world_kind == 'ego':
        config = EgoWorldConfig(height=value('World.ego_height', int),
                                width=value('World.ego_width', int),
                                focal=value('World.ego_focal', float),
                                ego_speed_range=parse_range(value('World.ego_speed', str)),
                                yaw_rate=value('World.ego_yaw_rate', float),
                                box_speed_range=parse_range(value('World.box_speed', str)),
                                length=value('World.ego_length', int))
    elif world_kind == 'bev':
        config = BEVWorldConfig(size=value('World.bev_size', int),
                                agent_count=value('World.bev_agents', int),
                                agent_size_range=parse_range(value('World.bev_agent_size', str), int),
                                speed_range=parse_range(value('World.bev_speed', str)),
                                turn_rate=value('World.bev_turn_rate', float),
                                length=value('World.bev_length', int))
    else:
        config = ToyWorldConfig(state_dim=value('World.toy_state_dim', int),
                                observation_dim=value('World.toy_observation_dim', int),
                                noise_std=value('World.toy_noise_std', float),
                                length=value('World.toy_length', int))
    try:
        config.validate()
    except Exception as e:
        raise ConfigError(f"Invalid [World] settings: {e}") from e
    return config
