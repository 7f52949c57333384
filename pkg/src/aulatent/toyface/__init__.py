from .render import FaceState, SubjectIdentity, identity_from_seed, render
from .dataset import ToyDataset, make_dataset, load_dataset, subject_identity_of
from .inversion import ToyInversionPair, pretrain_inversion_pair, FrozenPairError, InversionGateError
