"""Commands package for cdnet"""

from .main import cli, command_runner

__all__ = ['cli', 'command_runner']
