"""Project configuration module."""

import os
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, TypedDict

import uvlog

from vizecg.data import SynthConfig
from vizecg.errors import ConfigurationError
from vizecg.model import ModelConfig
from vizecg.raster import LayoutSpec
from vizecg.train import TrainConfig
from vizecg.utils import Template, eval_string, merge_dicts

__all__ = ["ProjectConfig", "Settings", "Configurator", "parse_env_flags"]


class ProjectConfig(TypedDict):
    """Project configuration with every default materialized.

    The `data`, `render`, `model` and `train` sections are the JSON representations of
    :py:class:`~vizecg.data.SynthConfig`, :py:class:`~vizecg.raster.LayoutSpec`,
    :py:class:`~vizecg.model.ModelConfig` and :py:class:`~vizecg.train.TrainConfig`.
    """

    debug: bool  #: verbose logging
    loglevel: uvlog.LevelName | None  #: level of the root `vizecg` logger
    logging: uvlog.uvlog._DictConfig  #: loggers and handlers settings
    data: dict[str, Any]  #: synthetic data generator settings
    render: dict[str, Any]  #: image layout settings
    model: dict[str, Any]  #: architecture settings
    train: dict[str, Any]  #: optimization settings


SECTIONS = frozenset(ProjectConfig.__annotations__)


@dataclass(frozen=True)
class Settings:
    """Runtime objects built from a project config."""

    synth: SynthConfig
    layout: LayoutSpec
    model: ModelConfig
    train: TrainConfig

    @classmethod
    def from_config(cls, config: ProjectConfig, /) -> "Settings":
        return cls(
            synth=SynthConfig.from_dict(config["data"]),
            layout=LayoutSpec.from_dict(config["render"]),
            model=ModelConfig.from_dict(config["model"]),
            train=TrainConfig.from_dict(config["train"]),
        )


def parse_env_flags(values: Sequence[str], /) -> dict[str, Any]:
    """Parse `KEY=VALUE` strings, values are evaluated with :py:func:`~vizecg.utils.eval_string`.

    >>> parse_env_flags(['epochs=5', 'lr=1e-3'])
    {'epochs': 5, 'lr': 0.001}
    """
    env = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"Invalid env value: {item!r}\n\nFix: Use the KEY=VALUE format.", value=item)
        env[key.strip()] = eval_string(value)
    return env


class Configurator:
    """Configuration loader.

    This class prepares a project config from config templates, template values and command line overrides.

    >>> template = {'model': {'preset': '[_doctest_preset]'}, 'train': {'epochs': 5}}
    >>> config = Configurator().create_configuration([template], [{'_doctest_preset': 'tiny'}])
    >>> config['train']['epochs'], config['train']['batch_size'], config['model']['channels']
    (5, 16, 8)

    """

    def create_configuration(
        self,
        templates: list[dict[str, Any]],
        envs: list[dict[str, Any]],
        *,
        overrides: dict[str, Any] | None = None,
        load_os_env: bool = False,
    ) -> ProjectConfig:
        """Create a project configuration from templates, template values and overrides.

        Loading order:

        1. Merge templates from first to last
        2. Merge env dicts from first to last
        3. Load OS environment variables (optional) for the template keys not set yet
        4. Evaluate the template using the resulting env dict
        5. Merge `overrides` (command line flags) on top
        6. Normalize and return the project config

        The resulting precedence is flags > config file > defaults.

        See :py:func:`~vizecg.utils.merge_dicts` function on the rules of how dictionaries are merged.

        See the `template-dict documentation <https://template-dict.readthedocs.io>`_ on template syntax.

        """
        template = Template(merge_dicts(*templates))
        envs = [*envs]
        if load_os_env:
            envs.insert(0, self.get_os_env(template))
        env = merge_dicts(*envs)
        config_dict = template.eval(env)
        if overrides:
            config_dict = merge_dicts(config_dict, overrides)
        return self.create_project_config(config_dict)

    @staticmethod
    def get_os_env(template: Template, /) -> dict[str, Any]:
        os_env = {}
        for key in template.keys:
            value = os.getenv(key)
            if value:
                os_env[key] = eval_string(value)
        return os_env

    @staticmethod
    def create_project_config(config_dict: dict, /) -> ProjectConfig:
        unknown = set(config_dict) - SECTIONS
        if unknown:
            raise ConfigurationError(
                f"Unknown config sections: {', '.join(sorted(unknown))}\n\n"
                f"Fix: Use only the following sections: {', '.join(sorted(SECTIONS))}.",
                sections=sorted(unknown),
            )
        for section in ("data", "render", "model", "train", "logging"):
            if not isinstance(config_dict.get(section, {}), dict):
                raise ConfigurationError(f"Config section `{section}` must be a mapping.", section=section)
        return ProjectConfig(
            debug=bool(config_dict.get("debug", False)),
            loglevel=config_dict.get("loglevel", None),
            logging=config_dict.get("logging", {}),
            data=SynthConfig.from_dict(config_dict.get("data", {})).json_repr(),
            render=LayoutSpec.from_dict(config_dict.get("render", {})).json_repr(),
            model=ModelConfig.from_dict(config_dict.get("model", {})).json_repr(),
            train=TrainConfig.from_dict(config_dict.get("train", {})).json_repr(),
        )
