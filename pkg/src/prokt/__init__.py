"""Progressive knowledge teaching: teacher-student co-training at desk scale."""

__version__ = "0.1.0"
