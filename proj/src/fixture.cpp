#include "bwm/fixture.hpp"

namespace bwm {

CohortConfig fixture_cohort_config() {
  CohortConfig c;
  c.subjects = 8;
  c.grid = Shape3{32, 32, 32};
  c.patch = 8;
  c.min_timepoints = 4;
  c.max_timepoints = 5;
  return c;
}

RunConfig fixture_run_config() {
  RunConfig r;
  r.model.patch = 8;
  r.model.latent_channels = 128;
  r.model.volume = Shape3{32, 32, 32};
  r.model.width = 128;
  r.train.steps = 5000;
  r.train.cosine = true;
  r.train.orientations = 8;
  r.train.seed = 1;
  r.model_seed = 1;
  return r;
}

PatchCodec<float> fit_codec(const std::vector<PatientTrajectory>& subjects, int patch, int channels) {
  std::vector<const Volume*> vols;
  for (const auto& s : subjects)
    for (const auto& t : s.timepoints) vols.push_back(&t.volume);
  return PatchCodec<float>::fit(vols, patch, channels);
}

Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.seed = seed;
  f.cohort_config = fixture_cohort_config();
  f.run = fixture_run_config();
  f.cohort = generate_cohort(seed, f.cohort_config);
  f.split = split_cohort(f.cohort, 0.8, seed);
  f.codec = fit_codec(f.split.train, f.run.model.patch, f.run.model.latent_channels);
  return f;
}

}  // namespace bwm
