"""Airborne pathogen transport in a 2-D room and reinforcement-learning control of the airflow."""

__version__ = "0.1.0"
