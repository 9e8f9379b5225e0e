#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stair/types.hpp"

namespace stair {

// ---------------------------------------------------------------------------
// Random Walk: an agent on a small grid takes uniform random actions
// (forward / turn left / turn right); the model predicts the agent's
// location after every action. Inputs are action tokens only, so the
// location must be tracked internally.
//
// Conventions: the agent starts at (0, 0) facing +y; turning is
// counterclockwise for TURN_LEFT; the grid is toroidal when wrap is set
// (blocked moves stay in place otherwise); location (x, y) maps to index
// y * grid_w + x.
// ---------------------------------------------------------------------------

enum RwAction : int { kForward = 0, kTurnLeft = 1, kTurnRight = 2 };

struct RandomWalkSpec {
  int grid_w = 8;
  int grid_h = 8;
  int seq_len = 100;  // actions per episode
  bool wrap = true;

  int n_actions() const { return 3; }
  int n_locations() const { return grid_w * grid_h; }
  int vocab_size() const { return n_actions() + n_locations() + 1; }
  int action_token(int a) const { return a; }
  int location_token(int x, int y) const { return n_actions() + y * grid_w + x; }
  int separator_token() const { return vocab_size() - 1; }

  void validate() const {
    if (grid_w * grid_h < 2) throw ConfigError("random_walk: grid must have at least 2 cells");
    if (seq_len < 1) throw ConfigError("random_walk: seq_len must be >= 1");
  }
};

// Plain state-machine form of the walk, usable as a replay oracle.
struct RwState {
  int x = 0, y = 0;
  int dx = 0, dy = 1;

  void apply(RwAction a, const RandomWalkSpec& spec) {
    switch (a) {
      case kForward: {
        int nx = x + dx, ny = y + dy;
        if (spec.wrap) {
          nx = (nx + spec.grid_w) % spec.grid_w;
          ny = (ny + spec.grid_h) % spec.grid_h;
          x = nx;
          y = ny;
        } else if (nx >= 0 && nx < spec.grid_w && ny >= 0 && ny < spec.grid_h) {
          x = nx;
          y = ny;
        }
        break;
      }
      case kTurnLeft: {
        int t = dx;
        dx = -dy;
        dy = t;
        break;
      }
      case kTurnRight: {
        int t = dx;
        dx = dy;
        dy = -t;
        break;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Algorithm: a stream of operations over n_vars variables with values in
// [0, value_range), executed sequentially. Supervision happens only at
// query positions; updates wrap modulo value_range.
//
// Tokens per op:  set v k   -> [SET, var_v, digit_k]
//                 add v w   -> [ADD, var_v, var_w]      v := (v + w) mod R
//                 sub v w   -> [SUB, var_v, var_w]      v := (v - w) mod R
//                 swap v w  -> [SWP, var_v, var_w]
//                 query v   -> [QRY, var_v]             target digit at var_v
// ---------------------------------------------------------------------------

enum AlgOp : int { kOpSet = 0, kOpAdd = 1, kOpSub = 2, kOpSwap = 3, kOpQuery = 4 };

struct AlgorithmSpec {
  int n_vars = 3;
  int value_range = 10;
  int seq_len = 100;        // operations per episode
  double query_frac = 0.3;  // share of query operations

  int n_ops() const { return 5; }
  int vocab_size() const { return n_ops() + n_vars + value_range + 1; }
  int op_token(int op) const { return op; }
  int var_token(int v) const { return n_ops() + v; }
  int digit_token(int k) const { return n_ops() + n_vars + k; }
  int separator_token() const { return vocab_size() - 1; }

  void validate() const {
    if (n_vars < 1 || value_range < 2) throw ConfigError("algorithm: bad variable domain");
    if (seq_len < 1) throw ConfigError("algorithm: seq_len must be >= 1");
    if (query_frac <= 0.0 || query_frac >= 1.0)
      throw ConfigError("algorithm: query_frac must be in (0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct Episode {
  TokenSeq inputs;
  std::vector<int> targets;  // same length; kIgnoreIndex where unsupervised
  uint64_t seed = 0;
  uint64_t spec_hash = 0;
  long index = 0;
};

uint64_t spec_hash(const RandomWalkSpec& spec);
uint64_t spec_hash(const AlgorithmSpec& spec);

std::vector<Episode> gen_random_walk(const RandomWalkSpec& spec, uint64_t seed, long count,
                                     long first_index = 0);
std::vector<Episode> gen_algorithm(const AlgorithmSpec& spec, uint64_t seed, long count,
                                   long first_index = 0);

// Line-delimited episode files: one `<seed> <index> | inputs | targets`
// record per line after a single header line.
void write_episodes(const std::string& path, const std::string& task_name, uint64_t seed,
                    uint64_t spec, const std::vector<Episode>& episodes);
struct EpisodeFile {
  std::string task_name;
  uint64_t seed = 0;
  uint64_t spec = 0;
  std::vector<Episode> episodes;
};
EpisodeFile read_episodes(const std::string& path);

// ---------------------------------------------------------------------------
// Character corpus
// ---------------------------------------------------------------------------

struct CharCorpus {
  std::vector<int> train, valid, test;      // token id streams, file order
  std::vector<unsigned char> id_to_byte;    // sorted distinct bytes present

  int vocab_size() const { return static_cast<int>(id_to_byte.size()); }
};

// Byte-level ingestion with contiguous fractional splits (test gets the
// remainder). Empty files are an error.
CharCorpus load_char_corpus(const std::string& path, double train_frac, double valid_frac);

// Deterministic synthetic text for the desk-scale language-model smoke
// path: template prose mixed with grid-walk transcripts, modular
// arithmetic lines and variable-tracking lines whose continuations require
// composing earlier context.
std::string gen_synthetic_text(uint64_t seed, size_t n_bytes);

}  // namespace stair
