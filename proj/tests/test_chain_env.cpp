#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "foldkd/chain_env.hpp"
#include "foldkd/errors.hpp"
#include "foldkd/expert.hpp"

using namespace foldkd;
using namespace foldkd::sim;

namespace {

Action random_action(std::mt19937_64& rng, std::size_t pickers) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Action a = Action::noop(pickers);
  for (auto& v : a.values) v = u(rng);
  return a;
}

// Pixel-space mass of one bilinear splat that lands fully inside the view.
double channel_sum(const Observation& obs, std::size_t ch) {
  double s = 0.0;
  for (std::size_t r = 0; r < Observation::kHeight; ++r)
    for (std::size_t c = 0; c < Observation::kWidth; ++c) s += obs.at(r, c, ch);
  return s;
}

}  // namespace

TEST_CASE("reset lays the chain flat at rest") {
  const auto task = TaskSpec::fold_free();
  const auto s = reset(task, 0);
  REQUIRE(s.positions.size() == task.n_particles);
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    CHECK(std::abs(s.positions[i].z) < 1e-12);
    CHECK(s.velocities[i].x == 0.0);
    CHECK(s.velocities[i].z == 0.0);
  }
  CHECK(s.pinned.empty());
  CHECK(s.stiffness >= task.stiffness * (1 - task.stiffness_range));
  CHECK(s.stiffness <= task.stiffness * (1 + task.stiffness_range));
  CHECK(reset(task, 0) == reset(task, 0));
  CHECK(reset(task, 0).stiffness != reset(task, 1).stiffness);
}

TEST_CASE("pinned endpoint never moves") {
  const auto task = TaskSpec::fold_pinned();
  auto s = reset(task, 4);
  REQUIRE(s.is_pinned(0));
  const Vec2 home = s.positions[0];
  for (int t = 0; t < 100; ++t) s = step(s, Action::noop(1), task).state;
  CHECK(s.positions[0] == home);

  std::mt19937_64 rng(7);
  s = reset(task, 5);
  for (int t = 0; t < 200; ++t) {
    auto a = random_action(rng, 1);
    // Park the picker on the pinned particle now and then; the pin must win.
    if (t % 20 == 0) a.values[2] = 1.0;
    s = step(s, a, task).state;
    CHECK(s.positions[0] == home);
  }
  s = reset(task, 6);
  data::ExpertMemory mem;
  for (std::size_t t = 0; t < task.horizon; ++t) {
    s = step(s, data::expert_policy(s, task, mem), task).state;
    CHECK(s.positions[0] == home);
  }
}

TEST_CASE("no-op on a resting chain keeps the reward") {
  for (auto task : {TaskSpec::fold_free(), TaskSpec::fold_pinned()}) {
    auto s = reset(task, 2);
    const double r0 = performance(s, task);
    for (int t = 0; t < 50; ++t) {
      const auto r = step(s, Action::noop(1), task);
      CHECK(std::abs(r.reward - r0) < 1e-9);
      s = r.state;
    }
  }
}

TEST_CASE("non-positive grip never grasps") {
  const auto task = TaskSpec::fold_free();
  std::mt19937_64 rng(3);
  auto s = reset(task, 3);
  for (int t = 0; t < 300; ++t) {
    auto a = random_action(rng, 1);
    a.values[2] = -std::abs(a.values[2]);
    s = step(s, a, task).state;
    CHECK_FALSE(s.grasped[0].has_value());
    CHECK_FALSE(s.gripping[0]);
  }
}

TEST_CASE("a grasped particle follows its picker") {
  const auto task = TaskSpec::fold_free();
  auto s = reset(task, 0);
  data::ExpertMemory mem;
  bool seen = false;
  for (std::size_t t = 0; t < task.horizon; ++t) {
    s = step(s, data::expert_policy(s, task, mem), task).state;
    if (s.grasped[0]) {
      seen = true;
      CHECK(s.positions[*s.grasped[0]].x == doctest::Approx(s.pickers[0].x).epsilon(1e-12));
      CHECK(s.positions[*s.grasped[0]].z == doctest::Approx(s.pickers[0].z).epsilon(1e-12));
    }
  }
  CHECK(seen);
}

TEST_CASE("reward strictly increases while the free end is carried onto the target") {
  // Scripted carry: grasp the free end, swing it over the midpoint on a half
  // circle (one waypoint per control step) and set it down on the anchored
  // end. From the top of the arc on, every step brings it closer to its target.
  for (auto task : {TaskSpec::fold_free(), TaskSpec::fold_pinned()}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto s = reset(task, seed);
      const Vec2 centre{task.chain_length() / 2, 0.0};
      const double radius = task.chain_length() / 2;
      auto move = [&](Vec2 goal, double grip) {
        const Vec2 d = goal - s.pickers[0];
        Action a{{std::clamp(d.x / task.max_picker_step, -1.0, 1.0),
                  std::clamp(d.z / task.max_picker_step, -1.0, 1.0), grip}};
        auto r = step(s, a, task);
        s = r.state;
        return r.reward;
      };
      while ((s.pickers[0] - s.positions.back()).norm() > 1e-9) move(s.positions.back(), -1.0);
      move(s.pickers[0], 1.0);
      REQUIRE(s.grasped[0] == task.n_particles - 1);

      constexpr int kSteps = 24;
      double prev = -1e300;
      for (int k = 1; k <= kSteps; ++k) {
        const double th = std::acos(-1.0) * k / kSteps;
        const Vec2 goal = centre + Vec2{std::cos(th), std::sin(th)} * radius;
        const double r = move({goal.x, std::max(goal.z, 0.0)}, 1.0);
        if (2 * k < kSteps) continue;
        CHECK(r > prev);
        prev = r;
      }
      CHECK(prev > performance(reset(task, seed), task));
    }
  }
}

TEST_CASE("step rejects malformed actions") {
  const auto task = TaskSpec::fold_free();
  const auto s = reset(task, 0);
  CHECK_THROWS_AS(step(s, Action{{0.0, 0.0}}, task), ContractError);
  CHECK_THROWS_AS(step(s, Action{{1.5, 0.0, 0.0}}, task), ContractError);
  CHECK_THROWS_AS(step(s, Action{{std::nan(""), 0.0, 0.0}}, task), ContractError);
}

TEST_CASE("unstable stiffness surfaces as a divergence error") {
  auto task = TaskSpec::fold_free();
  task.stiffness = 1e9;
  task.bend_stiffness = 1e8;
  auto s = reset(task, 0);
  std::mt19937_64 rng(1);
  auto run = [&] {
    for (int t = 0; t < 200; ++t) {
      auto a = random_action(rng, 1);
      a.values[2] = 1.0;
      s = step(s, a, task).state;
    }
  };
  CHECK_THROWS_AS(run(), SimulationDiverged);
}

TEST_CASE("reduced state geometry") {
  const auto task = TaskSpec::fold_free();
  const auto s = reset(task, 0);
  const auto r = reduced_state(s);
  REQUIRE(r.size() == task.state_dim());
  const double L = task.chain_length();
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == doctest::Approx(L / 2));
  CHECK(r[3] == 0.0);
  CHECK(r[4] == doctest::Approx(L));
  CHECK(r[5] == 0.0);
  CHECK(r[6] == s.pickers[0].x);
  CHECK(r[7] == s.pickers[0].z);

  const auto f = reduced_state(perfect_fold(task));
  CHECK(std::hypot(f[0] - f[4], f[1] - f[5]) < 1e-12);

  // Length and bounds hold along arbitrary rollouts.
  std::mt19937_64 rng(11);
  auto x = reset(task, 11);
  const auto box = view_box(task);
  for (int t = 0; t < 100; ++t) {
    x = step(x, random_action(rng, 1), task).state;
    const auto rs = reduced_state(x);
    REQUIRE(rs.size() == task.state_dim());
    for (std::size_t k = 0; k < rs.size(); k += 2) {
      CHECK(std::isfinite(rs[k]));
      CHECK(rs[k] >= box.x_min - 0.5);
      CHECK(rs[k] <= box.x_max + 0.5);
      CHECK(rs[k + 1] >= 0.0);
    }
  }
}

TEST_CASE("render is pure and bounded") {
  const auto task = TaskSpec::fold_pinned();
  auto s = reset(task, 0);
  const auto copy = s;
  const auto a = render(s, task);
  const auto b = render(s, task);
  CHECK(a == b);
  CHECK(s == copy);
  for (double v : a.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  double chain = channel_sum(a, 0);
  CHECK(chain > 10.0);
  CHECK(channel_sum(a, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(channel_sum(a, 2) == doctest::Approx(1.0).epsilon(1e-12));

  // Translating everything far outside the view leaves an empty, valid image.
  for (auto& p : s.positions) p.x += 10.0;
  for (auto& p : s.pickers) p.x += 10.0;
  const auto gone = render(s, task);
  for (double v : gone.pixels) CHECK(v == 0.0);
}

TEST_CASE("picker channel carries one unit of mass per picker") {
  auto task = TaskSpec::fold_free();
  std::mt19937_64 rng(5);
  const auto box = view_box(task);
  for (std::size_t pickers : {1u, 2u}) {
    task.n_pickers = pickers;
    for (int trial = 0; trial < 50; ++trial) {
      auto s = reset(task, trial);
      // Keep splats at least one pixel away from the border so no mass is clipped.
      const double mx = (box.x_max - box.x_min) / Observation::kWidth;
      const double mz = (box.z_max - box.z_min) / Observation::kHeight;
      std::uniform_real_distribution<double> ux(box.x_min + mx, box.x_max - mx);
      std::uniform_real_distribution<double> uz(box.z_min + mz, box.z_max - mz);
      for (auto& p : s.pickers) p = {ux(rng), uz(rng)};
      // Separate pickers so that the per-pixel saturation at 1 never triggers.
      if (pickers == 2) s.pickers[1].x = s.pickers[0].x > 0.2 ? s.pickers[0].x - 0.15
                                                              : s.pickers[0].x + 0.15;
      CHECK(channel_sum(render(s, task), 1) ==
            doctest::Approx(static_cast<double>(pickers)).epsilon(1e-9));
    }
  }
}

TEST_CASE("render is mirror symmetric for mirrored states") {
  const auto task = TaskSpec::fold_free();
  const double c = task.workspace_center_x();
  std::mt19937_64 rng(9);
  auto s = reset(task, 9);
  for (int t = 0; t < 20; ++t) s = step(s, random_action(rng, 1), task).state;
  auto m = s;
  for (auto& p : m.positions) p.x = 2 * c - p.x;
  for (auto& p : m.pickers) p.x = 2 * c - p.x;
  const auto a = render(s, task), b = render(m, task);
  for (std::size_t r = 0; r < Observation::kHeight; ++r)
    for (std::size_t col = 0; col < Observation::kWidth; ++col)
      for (std::size_t ch = 0; ch < Observation::kChannels; ++ch)
        CHECK(a.at(r, col, ch) ==
              doctest::Approx(b.at(r, Observation::kWidth - 1 - col, ch)).epsilon(1e-9));
}

TEST_CASE("performance scoring") {
  for (auto task : {TaskSpec::fold_free(), TaskSpec::fold_pinned()}) {
    const double s_opt = performance(perfect_fold(task), task);
    CHECK(s_opt == task.optimal_score());
    const double s0 = performance(reset(task, 0), task);
    CHECK(s0 < s_opt);
    // Flat chain: pairs i and N-1-i sit (N-1-2i) spacings apart.
    const std::size_t n = task.n_particles;
    double align = 0.0;
    for (std::size_t i = 0; i < n / 2; ++i)
      align += task.spacing * static_cast<double>(n - 1 - 2 * i);
    CHECK(s0 == doctest::Approx(-align / static_cast<double>(n / 2)));
    CHECK(performance(mirrored_fold(task), task) < s_opt);
  }
}

TEST_CASE("gravity-free chain at rest stays fixed") {
  auto task = TaskSpec::fold_free();
  task.gravity = 0.0;
  auto s = reset(task, 0);
  const auto start = s.positions;
  for (int t = 0; t < 200; ++t) s = step(s, Action::noop(1), task).state;
  for (std::size_t i = 0; i < start.size(); ++i) {
    CHECK((s.positions[i] - start[i]).norm() < 1e-12);
    CHECK(s.velocities[i].norm() < 1e-12);
  }
}

TEST_CASE("unforced kinetic energy does not grow over 50-step windows") {
  auto task = TaskSpec::fold_free();
  task.gravity = 0.0;
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd(0.0, 0.2);
  for (int trial = 0; trial < 5; ++trial) {
    auto s = reset(task, trial);
    for (auto& v : s.velocities) v = {nd(rng), std::abs(nd(rng))};
    std::vector<double> energy{kinetic_energy(s, task)};
    for (int t = 0; t < 200; ++t) {
      s = step(s, Action::noop(1), task).state;
      energy.push_back(kinetic_energy(s, task));
    }
    for (std::size_t t = 0; t + 50 < energy.size(); ++t) CHECK(energy[t + 50] <= energy[t]);
  }
}

TEST_CASE("trajectories are bitwise reproducible") {
  const auto task = TaskSpec::fold_free();
  auto run = [&] {
    std::mt19937_64 rng(21);
    auto s = reset(task, 21);
    std::vector<double> rewards;
    for (int t = 0; t < 60; ++t) {
      auto r = step(s, random_action(rng, 1), task);
      rewards.push_back(r.reward);
      s = r.state;
    }
    return std::make_pair(s, rewards);
  };
  CHECK(run() == run());
}

TEST_CASE("task names round-trip") {
  CHECK(parse_task("fold-free") == TaskId::FoldFree);
  CHECK(parse_task(task_name(TaskId::FoldPinned)) == TaskId::FoldPinned);
  CHECK_THROWS_AS(parse_task("fold-diagonal"), ConfigError);
}
