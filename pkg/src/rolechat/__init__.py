"""rolechat: role-play prompting toolkit for open-domain conversational agents."""

__version__ = "0.1.0"
