# -*- coding: utf-8 -*-
from .errors import FairRagError
from .orchestrator import FairRagPipeline, PipelineConfig


__version__ = '0.1.0'
__all__ = ['FairRagError', 'FairRagPipeline', 'PipelineConfig', '__version__']
