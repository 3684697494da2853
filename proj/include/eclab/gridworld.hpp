#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "eclab/rng.hpp"
#include "eclab/tensor.hpp"

namespace eclab {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

inline constexpr int kGridSize = 5;
inline constexpr int kCellPx = 3;
inline constexpr int kImageSize = kGridSize * kCellPx;  // 15x15 RGB observations
inline constexpr int kNumActions = 6;
inline constexpr int kMaxObjectCount = 3;

enum class Mission { Collect = 0, Paint = 1, Bring = 2 };
enum class Action { Up = 0, Down = 1, Left = 2, Right = 3, Paint = 4, Stop = 5 };
enum class Status { Ongoing = 0, Success = 1, Failure = 2 };

struct Task {
  Mission mission = Mission::Collect;
  int color = 0;  // palette index
  int count = 1;  // 1..3
  bool operator==(const Task&) const = default;
};

struct StepOutcome {
  double reward = 0.0;
  Status status = Status::Ongoing;
};

struct InventoryItem {
  int color = 0;
  bool painted = false;
  bool operator==(const InventoryItem&) const = default;
};

struct Rgb {
  double r, g, b;
};

// Object palette in index order, then reserved marker colors.
inline constexpr Rgb kPalette[] = {
    {1, 1, 0},        // yellow
    {0, 0, 1},        // blue
    {1, 0, 0},        // red
    {0.5, 0, 0},      // maroon
    {0.5, 0.5, 0.5},  // gray
    {0, 1, 1},        // cyan
    {1, 0.5, 0},      // orange
    {0.5, 0, 1},      // purple
};
inline constexpr int kPaletteSize = 8;
inline constexpr Rgb kAgentColor = {0, 1, 0};
inline constexpr Rgb kPaintMarker = {1, 0.4, 0.7};
inline constexpr Rgb kBringMarker = {0.1, 0.1, 0.1};
inline constexpr Rgb kDropZoneTint = {0.2, 0.2, 0.2};

inline const char* color_name(int index) {
  static const char* names[] = {"YELLOW", "BLUE", "RED", "MAROON", "GRAY", "CYAN", "ORANGE", "PURPLE"};
  return names[index];
}
inline const char* number_name(int count) {
  static const char* names[] = {"ONE", "TWO", "THREE"};
  return names[count - 1];
}
inline const char* mission_name(Mission m) {
  switch (m) {
    case Mission::Collect: return "COLLECT";
    case Mission::Paint: return "PAINT";
    default: return "BRING";
  }
}
inline const char* action_name(Action a) {
  static const char* names[] = {"UP", "DOWN", "LEFT", "RIGHT", "PAINT", "STOP"};
  return names[static_cast<int>(a)];
}
inline const char* status_name(Status s) {
  static const char* names[] = {"ONGOING", "SUCCESS", "FAILURE"};
  return names[static_cast<int>(s)];
}

// Task axes in play plus world-population knobs. C colors means the first C
// palette entries; a single mission means Collect, two means Collect+Paint.
struct EnvConfig {
  int num_colors = 3;
  int num_numbers = 1;
  int num_missions = 1;
  int max_steps = 50;
  bool extra_target = true;  // board may hold count+1 target objects
  int min_distractors = 1;
  int max_distractors = 3;

  void validate() const {
    if (num_colors < 1 || num_colors > kPaletteSize)
      throw ConfigError("colors in play must be 1.." + std::to_string(kPaletteSize));
    if (num_numbers < 1 || num_numbers > kMaxObjectCount) throw ConfigError("numbers in play must be 1..3");
    if (num_missions < 1 || num_missions > 3) throw ConfigError("missions in play must be 1..3");
    if (max_steps < 1) throw ConfigError("max_steps must be positive");
    if (min_distractors < 0 || max_distractors < min_distractors) throw ConfigError("bad distractor range");
  }

  int task_space_size() const { return num_colors * num_numbers * num_missions; }

  std::vector<Task> all_tasks() const {
    std::vector<Task> out;
    for (int m = 0; m < num_missions; ++m)
      for (int c = 0; c < num_colors; ++c)
        for (int n = 1; n <= num_numbers; ++n)
          out.push_back({static_cast<Mission>(m), c, n});
    return out;
  }
};

struct WorldState {
  std::array<int, kGridSize * kGridSize> grid{};  // -1 empty, else palette color index
  int agent_row = 0;
  int agent_col = 0;
  std::vector<InventoryItem> inventory;
  int steps_taken = 0;
  Task task;
  bool drop_zone_active = false;  // whole top row, Bring only
  Status status = Status::Ongoing;

  int cell(int r, int c) const { return grid[static_cast<std::size_t>(r * kGridSize + c)]; }
  int& cell(int r, int c) { return grid[static_cast<std::size_t>(r * kGridSize + c)]; }

  int objects_on_grid() const {
    int n = 0;
    for (int v : grid) n += (v >= 0);
    return n;
  }
  int collected_of(int color) const {
    int n = 0;
    for (const auto& it : inventory) n += (it.color == color);
    return n;
  }
};

// Uniform draw over the configured mission x color x count cross product.
inline Task sample_task(Rng& rng, const EnvConfig& cfg) {
  cfg.validate();
  Task t;
  t.color = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_colors)));
  t.count = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_numbers)));
  t.mission = static_cast<Mission>(rng.next_below(static_cast<std::uint64_t>(cfg.num_missions)));
  return t;
}

// Random board: count (+ maybe one extra) target objects, one to three
// distractors of other in-play colors, agent on an empty cell. Bring keeps
// the top row clear and spawns the agent outside it.
inline WorldState generate_world(Rng& rng, const Task& task, const EnvConfig& cfg) {
  WorldState s;
  s.task = task;
  s.drop_zone_active = task.mission == Mission::Bring;
  for (auto& c : s.grid) c = -1;

  const int extra = cfg.extra_target ? static_cast<int>(rng.next_below(2)) : 0;
  const int n_target = task.count + extra;
  std::vector<int> other_colors;
  for (int c = 0; c < cfg.num_colors; ++c)
    if (c != task.color) other_colors.push_back(c);
  const int n_distract =
      other_colors.empty() ? 0 : rng.next_int(cfg.min_distractors, cfg.max_distractors);

  std::vector<int> cells;
  for (int r = s.drop_zone_active ? 1 : 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c) cells.push_back(r * kGridSize + c);
  // partial Fisher-Yates for distinct object cells
  const int n_objects = n_target + n_distract;
  for (int i = 0; i < n_objects; ++i) {
    const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cells.size() - static_cast<std::size_t>(i))));
    std::swap(cells[static_cast<std::size_t>(i)], cells[static_cast<std::size_t>(j)]);
  }
  for (int i = 0; i < n_target; ++i) s.grid[static_cast<std::size_t>(cells[static_cast<std::size_t>(i)])] = task.color;
  for (int i = n_target; i < n_objects; ++i) {
    const int dc = other_colors[rng.next_below(other_colors.size())];
    s.grid[static_cast<std::size_t>(cells[static_cast<std::size_t>(i)])] = dc;
  }

  std::vector<int> empty;
  for (int r = s.drop_zone_active ? 1 : 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c)
      if (s.cell(r, c) < 0) empty.push_back(r * kGridSize + c);
  const int spawn = empty[rng.next_below(empty.size())];
  s.agent_row = spawn / kGridSize;
  s.agent_col = spawn % kGridSize;
  return s;
}

namespace detail {

inline bool stop_predicate(const WorldState& s) {
  switch (s.task.mission) {
    case Mission::Collect:
      return s.collected_of(s.task.color) == s.task.count;
    case Mission::Paint: {
      if (s.collected_of(s.task.color) != s.task.count) return false;
      for (const auto& it : s.inventory)
        if (!it.painted) return false;
      return true;
    }
    case Mission::Bring:
      return false;  // Bring succeeds only by entering the drop zone
  }
  return false;
}

}  // namespace detail

// Deterministic transition. Every step carries the -0.1 term; +0.1 on a
// correct collection; +1.0 on the success-terminal step. Failure adds
// nothing beyond the step term.
inline std::pair<WorldState, StepOutcome> step(const WorldState& state, Action action, const EnvConfig& cfg) {
  if (state.status != Status::Ongoing) throw UsageError("step on a terminal state");
  WorldState next = state;
  next.steps_taken += 1;
  double reward = -0.1;
  Status status = Status::Ongoing;

  switch (action) {
    case Action::Up:
    case Action::Down:
    case Action::Left:
    case Action::Right: {
      int nr = next.agent_row, nc = next.agent_col;
      if (action == Action::Up) nr -= 1;
      if (action == Action::Down) nr += 1;
      if (action == Action::Left) nc -= 1;
      if (action == Action::Right) nc += 1;
      if (nr < 0 || nr >= kGridSize || nc < 0 || nc >= kGridSize) break;  // off-grid: no-op
      next.agent_row = nr;
      next.agent_col = nc;
      if (next.drop_zone_active && nr == 0) {
        if (next.collected_of(next.task.color) == next.task.count)
          status = Status::Success;
        else
          status = Status::Failure;
        break;
      }
      if (next.cell(nr, nc) >= 0) {
        const int color = next.cell(nr, nc);
        next.cell(nr, nc) = -1;
        next.inventory.push_back({color, false});
        const bool correct = color == next.task.color && next.collected_of(next.task.color) <= next.task.count;
        if (correct)
          reward += 0.1;
        else
          status = Status::Failure;
      }
      break;
    }
    case Action::Paint:
      if (!next.inventory.empty() && !next.inventory.back().painted) next.inventory.back().painted = true;
      break;  // empty or already-painted: penalized no-op
    case Action::Stop:
      status = detail::stop_predicate(next) ? Status::Success : Status::Failure;
      break;
  }

  if (status == Status::Success) reward += 1.0;
  if (status == Status::Ongoing && next.steps_taken >= cfg.max_steps) status = Status::Failure;
  next.status = status;
  return {next, {reward, status}};
}

inline double speaker_return(bool success) { return success ? 1.0 : 0.0; }

// ---------------------------------------------------------------------------
// rendering: each grid cell is a 3x3 pixel block, channels RGB in [0,1]
// ---------------------------------------------------------------------------

namespace detail {

inline void fill_cell(Tensor& img, int r, int c, Rgb color) {
  for (int i = 0; i < kCellPx; ++i)
    for (int j = 0; j < kCellPx; ++j) {
      const std::size_t base = ((static_cast<std::size_t>(r * kCellPx + i)) * kImageSize + (c * kCellPx + j)) * 3;
      img[base] = color.r;
      img[base + 1] = color.g;
      img[base + 2] = color.b;
    }
}

inline void center_pixel(Tensor& img, int r, int c, Rgb color) {
  const std::size_t base = ((static_cast<std::size_t>(r * kCellPx + 1)) * kImageSize + (c * kCellPx + 1)) * 3;
  img[base] = color.r;
  img[base + 1] = color.g;
  img[base + 2] = color.b;
}

}  // namespace detail

inline Tensor render_world(const WorldState& s) {
  Tensor img = Tensor::zeros({kImageSize, kImageSize, 3});
  if (s.drop_zone_active)
    for (int c = 0; c < kGridSize; ++c) detail::fill_cell(img, 0, c, kDropZoneTint);
  for (int r = 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c)
      if (s.cell(r, c) >= 0) detail::fill_cell(img, r, c, kPalette[s.cell(r, c)]);
  detail::fill_cell(img, s.agent_row, s.agent_col, kAgentColor);
  return img;
}

// Collected objects in collection order on the bottom row; painted objects
// carry the pink center pixel. No mission markers here: those encode the
// goal, which the listener must not see.
inline Tensor render_inventory(const WorldState& s) {
  Tensor img = Tensor::zeros({kImageSize, kImageSize, 3});
  const int n = static_cast<int>(s.inventory.size());
  for (int i = 0; i < n && i < kGridSize; ++i) {
    detail::fill_cell(img, kGridSize - 1, i, kPalette[s.inventory[static_cast<std::size_t>(i)].color]);
    if (s.inventory[static_cast<std::size_t>(i)].painted)
      detail::center_pixel(img, kGridSize - 1, i, kPaintMarker);
  }
  return img;
}

// count blocks of the task color, left to right on the bottom row, with a
// mission marker pixel: black center for Bring, pink for Paint, none for
// Collect.
inline Tensor render_goal(const Task& task) {
  Tensor img = Tensor::zeros({kImageSize, kImageSize, 3});
  for (int i = 0; i < task.count; ++i) {
    detail::fill_cell(img, kGridSize - 1, i, kPalette[task.color]);
    if (task.mission == Mission::Bring) detail::center_pixel(img, kGridSize - 1, i, kBringMarker);
    if (task.mission == Mission::Paint) detail::center_pixel(img, kGridSize - 1, i, kPaintMarker);
  }
  return img;
}

// Ordered concept tokens for the CI corpus: color, number, optionally mission.
inline std::vector<std::string> concepts_of(const Task& task, bool include_mission) {
  std::vector<std::string> out = {color_name(task.color), number_name(task.count)};
  if (include_mission) out.push_back(mission_name(task.mission));
  return out;
}

// Binary portable pixmap (P6), maxval 255.
inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.shape().size() != 3 || img.dim(2) != 3)
    throw ShapeError("write_ppm: expected HxWx3 image, got " + shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValueError("cannot write " + path);
  os << "P6\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  for (std::size_t i = 0; i < img.numel(); ++i) {
    double v = img[i];
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    os.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
  }
}

}  // namespace eclab
