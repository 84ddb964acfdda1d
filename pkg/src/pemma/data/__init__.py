from pemma.data.ehr import EHR_DIM, build_ehr_features, ehr_matrix, ehr_sentence
from pemma.data.manifest import CenterManifest, default_manifest_dict, load_manifest, manifest_from_dict
from pemma.data.nifti import read_nifti, write_nifti
from pemma.data.phantom import CENTER_SHIFTS, PhantomSpec, generate_phantom
from pemma.data.preprocessing import normalize_ct, normalize_pet, preprocess_intensities
from pemma.data.rawvolume import read_raw_volume, write_raw_volume
from pemma.data.sampling import sample_modality_mode, sample_patches
from pemma.data.types import BACKGROUND, LYMPH, TUMOR, Case, SurvivalRecord, Volume

__all__ = [
    "EHR_DIM", "build_ehr_features", "ehr_matrix", "ehr_sentence",
    "CenterManifest", "default_manifest_dict", "load_manifest", "manifest_from_dict",
    "read_nifti", "write_nifti",
    "CENTER_SHIFTS", "PhantomSpec", "generate_phantom",
    "normalize_ct", "normalize_pet", "preprocess_intensities",
    "read_raw_volume", "write_raw_volume",
    "sample_modality_mode", "sample_patches",
    "BACKGROUND", "LYMPH", "TUMOR", "Case", "SurvivalRecord", "Volume",
]
