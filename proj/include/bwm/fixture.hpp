#pragma once

// The small synthetic setup shared by the acceptance suite, the tests and the
// CLI defaults: an 8-subject 32^3 cohort, an 80/20 subject split, a PCA patch
// codec fitted on the training subjects and a run configuration sized for one
// CPU core.

#include "bwm/cohort.hpp"
#include "bwm/train.hpp"

namespace bwm {

struct Fixture {
  std::uint64_t seed = 7;
  CohortConfig cohort_config;
  std::vector<PatientTrajectory> cohort;
  CohortSplit split;
  PatchCodec<float> codec;
  RunConfig run;
};

CohortConfig fixture_cohort_config();
RunConfig fixture_run_config();

// Generates the cohort, splits it with `seed` and fits the codec on the
// training volumes.
Fixture make_fixture(std::uint64_t seed = 7);

// Fits the codec to every volume of `subjects`.
PatchCodec<float> fit_codec(const std::vector<PatientTrajectory>& subjects, int patch, int channels);

}  // namespace bwm
