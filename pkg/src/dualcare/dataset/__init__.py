from dualcare.dataset.cases import (
    CaseFormatError,
    PatientCase,
    dump_cases,
    load_cases,
    resolve_option,
)

__all__ = ["CaseFormatError", "PatientCase", "dump_cases", "load_cases", "resolve_option"]
