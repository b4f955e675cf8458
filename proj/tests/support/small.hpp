#pragma once

// A 16^3 three-subject cohort with a tiny model, for tests that need a real
// (if untrained) pipeline without the cost of the fixture.

#include "bwm/cohort.hpp"
#include "bwm/fixture.hpp"
#include "bwm/train.hpp"

namespace bwm::small {

inline CohortConfig small_cohort_config() {
  CohortConfig c;
  c.subjects = 3;
  c.grid = Shape3{16, 16, 16};
  c.patch = 4;
  c.min_timepoints = 3;
  c.max_timepoints = 4;
  return c;
}

inline RunConfig small_run_config() {
  RunConfig r;
  r.model.layers = 2;
  r.model.width = 16;
  r.model.heads = 2;
  r.model.ffn_mult = 2;
  r.model.latent_channels = 8;
  r.model.patch = 4;
  r.model.volume = Shape3{16, 16, 16};
  r.model.taps = {1};
  r.model.flow_blocks = 1;
  r.model.aligner_width = 4;
  r.model.sampler_steps = 4;
  r.train.steps = 6;
  r.train.warmup_steps = 2;
  r.train.seed = 5;
  r.model_seed = 2;
  return r;
}

struct Small {
  std::vector<PatientTrajectory> cohort;
  PatchCodec<float> codec;
  Dataset<float> data;
  RunConfig run;
};

inline Small make_small(std::uint64_t seed = 4) {
  Small s;
  s.cohort = generate_cohort(seed, small_cohort_config());
  s.run = small_run_config();
  s.codec = fit_codec(s.cohort, s.run.model.patch, s.run.model.latent_channels);
  s.data = prepare_dataset(s.cohort, s.codec);
  return s;
}

}  // namespace bwm::small
