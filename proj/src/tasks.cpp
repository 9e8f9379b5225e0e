#include "stair/tasks.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

#include "stair/rng.hpp"

namespace stair {

uint64_t spec_hash(const RandomWalkSpec& spec) {
  std::ostringstream os;
  os << "random_walk/" << spec.grid_w << "x" << spec.grid_h << "/" << spec.seq_len << "/"
     << (spec.wrap ? "torus" : "walls");
  return Rng::fnv1a(os.str());
}

uint64_t spec_hash(const AlgorithmSpec& spec) {
  std::ostringstream os;
  os << "algorithm/" << spec.n_vars << "/" << spec.value_range << "/" << spec.seq_len << "/"
     << spec.query_frac;
  return Rng::fnv1a(os.str());
}

std::vector<Episode> gen_random_walk(const RandomWalkSpec& spec, uint64_t seed, long count,
                                     long first_index) {
  spec.validate();
  std::vector<Episode> out;
  out.reserve(count);
  const uint64_t sh = spec_hash(spec);
  for (long e = 0; e < count; ++e) {
    const long index = first_index + e;
    Rng rng(seed, "random_walk/" + std::to_string(index));
    Episode ep;
    ep.seed = seed;
    ep.spec_hash = sh;
    ep.index = index;
    ep.inputs.ids.reserve(spec.seq_len);
    ep.targets.reserve(spec.seq_len);
    RwState st;
    for (int t = 0; t < spec.seq_len; ++t) {
      const RwAction a = static_cast<RwAction>(rng.uniform_int(3));
      st.apply(a, spec);
      ep.inputs.ids.push_back(spec.action_token(a));
      ep.targets.push_back(spec.location_token(st.x, st.y));
    }
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<Episode> gen_algorithm(const AlgorithmSpec& spec, uint64_t seed, long count,
                                   long first_index) {
  spec.validate();
  std::vector<Episode> out;
  out.reserve(count);
  const uint64_t sh = spec_hash(spec);
  for (long e = 0; e < count; ++e) {
    const long index = first_index + e;
    Rng rng(seed, "algorithm/" + std::to_string(index));
    Episode ep;
    ep.seed = seed;
    ep.spec_hash = sh;
    ep.index = index;
    std::vector<int> vals(spec.n_vars, 0);
    for (int t = 0; t < spec.seq_len; ++t) {
      const bool query = rng.uniform() < spec.query_frac;
      const int v = static_cast<int>(rng.uniform_int(spec.n_vars));
      if (query) {
        ep.inputs.ids.push_back(spec.op_token(kOpQuery));
        ep.targets.push_back(kIgnoreIndex);
        ep.inputs.ids.push_back(spec.var_token(v));
        ep.targets.push_back(spec.digit_token(vals[v]));
        continue;
      }
      const int op = static_cast<int>(rng.uniform_int(4));  // SET/ADD/SUB/SWP
      switch (op) {
        case kOpSet: {
          const int k = static_cast<int>(rng.uniform_int(spec.value_range));
          vals[v] = k;
          ep.inputs.ids.push_back(spec.op_token(kOpSet));
          ep.inputs.ids.push_back(spec.var_token(v));
          ep.inputs.ids.push_back(spec.digit_token(k));
          break;
        }
        case kOpAdd:
        case kOpSub: {
          const int w = static_cast<int>(rng.uniform_int(spec.n_vars));
          if (op == kOpAdd)
            vals[v] = (vals[v] + vals[w]) % spec.value_range;
          else
            vals[v] = ((vals[v] - vals[w]) % spec.value_range + spec.value_range) %
                      spec.value_range;
          ep.inputs.ids.push_back(spec.op_token(op));
          ep.inputs.ids.push_back(spec.var_token(v));
          ep.inputs.ids.push_back(spec.var_token(w));
          break;
        }
        default: {
          const int w = static_cast<int>(rng.uniform_int(spec.n_vars));
          std::swap(vals[v], vals[w]);
          ep.inputs.ids.push_back(spec.op_token(kOpSwap));
          ep.inputs.ids.push_back(spec.var_token(v));
          ep.inputs.ids.push_back(spec.var_token(w));
          break;
        }
      }
      while (ep.targets.size() < ep.inputs.ids.size()) ep.targets.push_back(kIgnoreIndex);
    }
    out.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode files
// ---------------------------------------------------------------------------

void write_episodes(const std::string& path, const std::string& task_name, uint64_t seed,
                    uint64_t spec, const std::vector<Episode>& episodes) {
  std::ofstream f(path);
  if (!f) throw IoError("write_episodes: cannot open " + path);
  f << "# stairlab-episodes v1 task=" << task_name << " seed=" << seed << " spec=" << spec
    << " count=" << episodes.size() << "\n";
  for (const auto& ep : episodes) {
    f << ep.seed << " " << ep.index << " |";
    for (int id : ep.inputs.ids) f << " " << id;
    f << " |";
    for (int t : ep.targets) f << " " << t;
    f << "\n";
  }
  if (!f) throw IoError("write_episodes: write failed for " + path);
}

EpisodeFile read_episodes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_episodes: cannot open " + path);
  EpisodeFile out;
  std::string header;
  if (!std::getline(f, header) || header.rfind("# stairlab-episodes v1", 0) != 0)
    throw IoError("read_episodes: bad header in " + path);
  {
    std::istringstream hs(header);
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("task=", 0) == 0) out.task_name = tok.substr(5);
      if (tok.rfind("seed=", 0) == 0) out.seed = std::stoull(tok.substr(5));
      if (tok.rfind("spec=", 0) == 0) out.spec = std::stoull(tok.substr(5));
    }
  }
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Episode ep;
    std::string bar;
    ls >> ep.seed >> ep.index >> bar;
    if (bar != "|") throw IoError("read_episodes: malformed record in " + path);
    std::string tok;
    bool in_targets = false;
    while (ls >> tok) {
      if (tok == "|") {
        in_targets = true;
        continue;
      }
      (in_targets ? ep.targets : ep.inputs.ids).push_back(std::stoi(tok));
    }
    if (ep.inputs.ids.size() != ep.targets.size())
      throw IoError("read_episodes: input/target length mismatch in " + path);
    ep.spec_hash = out.spec;
    out.episodes.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Character corpus
// ---------------------------------------------------------------------------

CharCorpus load_char_corpus(const std::string& path, double train_frac, double valid_frac) {
  if (train_frac < 0 || valid_frac < 0 || train_frac + valid_frac > 1.0 + 1e-12)
    throw ConfigError("load_char_corpus: split fractions must be non-negative and sum <= 1");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_char_corpus: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("load_char_corpus: empty file " + path);

  std::set<unsigned char> present(bytes.begin(), bytes.end());
  CharCorpus corpus;
  corpus.id_to_byte.assign(present.begin(), present.end());
  std::array<int, 256> byte_to_id;
  byte_to_id.fill(-1);
  for (size_t i = 0; i < corpus.id_to_byte.size(); ++i)
    byte_to_id[corpus.id_to_byte[i]] = static_cast<int>(i);

  const size_t n = bytes.size();
  const size_t n_train = static_cast<size_t>(n * train_frac);
  const size_t n_valid = static_cast<size_t>(n * valid_frac);
  auto to_ids = [&](size_t lo, size_t hi) {
    std::vector<int> ids;
    ids.reserve(hi - lo);
    for (size_t i = lo; i < hi; ++i) ids.push_back(byte_to_id[static_cast<unsigned char>(bytes[i])]);
    return ids;
  };
  corpus.train = to_ids(0, n_train);
  corpus.valid = to_ids(n_train, n_train + n_valid);
  corpus.test = to_ids(n_train + n_valid, n);
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic smoke-test text
// ---------------------------------------------------------------------------

namespace {

void append_walk_line(std::string& out, Rng& rng) {
  RandomWalkSpec spec;  // 8x8 torus
  RwState st;
  const int len = 10 + static_cast<int>(rng.uniform_int(14));
  out += "walk: ";
  for (int i = 0; i < len; ++i) {
    const RwAction a = static_cast<RwAction>(rng.uniform_int(3));
    st.apply(a, spec);
    out += "FLR"[a];
  }
  out += " => ";
  out += std::to_string(st.x);
  out += ',';
  out += std::to_string(st.y);
  out += ";\n";
}

void append_calc_line(std::string& out, Rng& rng) {
  const int a = static_cast<int>(rng.uniform_int(100));
  const int b = static_cast<int>(rng.uniform_int(100));
  const bool plus = rng.uniform() < 0.5;
  const int r = plus ? (a + b) % 100 : ((a - b) % 100 + 100) % 100;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "calc: %02d%c%02d = %02d\n", a, plus ? '+' : '-', b, r);
  out += buf;
}

void append_vars_line(std::string& out, Rng& rng) {
  int a = static_cast<int>(rng.uniform_int(10));
  int b = static_cast<int>(rng.uniform_int(10));
  out += "let a=" + std::to_string(a) + " b=" + std::to_string(b) + ";";
  const int hops = 1 + static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < hops; ++i) {
    switch (rng.uniform_int(3)) {
      case 0:
        std::swap(a, b);
        out += " swap;";
        break;
      case 1:
        a = (a + b) % 10;
        out += " a+=b;";
        break;
      default:
        b = (b + a) % 10;
        out += " b+=a;";
        break;
    }
  }
  if (rng.uniform() < 0.5)
    out += " a? " + std::to_string(a) + "\n";
  else
    out += " b? " + std::to_string(b) + "\n";
}

void append_prose_line(std::string& out, Rng& rng) {
  static const char* subjects[] = {"the quiet river", "a grey heron",   "the old signal",
                                   "the night train", "a distant bell", "the paper kite"};
  static const char* verbs[] = {"carries", "follows", "crosses", "watches", "remembers"};
  static const char* objects[] = {"the wooden bridge", "the morning fog", "the empty field",
                                  "the narrow road",   "the broken fence"};
  out += subjects[rng.uniform_int(6)];
  out += ' ';
  out += verbs[rng.uniform_int(5)];
  out += ' ';
  out += objects[rng.uniform_int(5)];
  out += ".\n";
}

}  // namespace

std::string gen_synthetic_text(uint64_t seed, size_t n_bytes) {
  Rng rng(seed, "synthetic_text");
  std::string out;
  out.reserve(n_bytes + 64);
  while (out.size() < n_bytes) {
    const double u = rng.uniform();
    if (u < 0.35)
      append_walk_line(out, rng);
    else if (u < 0.55)
      append_calc_line(out, rng);
    else if (u < 0.70)
      append_vars_line(out, rng);
    else
      append_prose_line(out, rng);
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace stair
