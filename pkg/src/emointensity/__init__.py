from .dataset import Corpus, Emotion, Utterance

__version__ = "0.1.0"
