#pragma once

#include <map>
#include <string>

namespace stair {

// Flat name -> integer instrumentation table. The scheduler and the core
// sublayers increment these during a run; the analytic cost model produces
// the same names so the two can be compared for exact equality.
//
//   core_calls    one per TransCore application batch (scheduler step)
//   query_tokens  tokens entering as queries, summed over core calls
//   kv_tokens     key/value tokens visible, summed over core calls
//   qk_pairs      mask-allowed (query, key) pairs, summed over every
//                 attention sublayer application
//   ff_tokens     rows processed by feedforward sublayers
//   emitted_tokens tokens whose final states were produced
//   passes_hist/N  tokens that went through the core exactly N times
struct Counters {
  std::map<std::string, long long> table;

  // Test instrumentation: when trace_layers is set, the core appends one
  // letter per layer application so tests can assert composition order.
  bool trace_layers = false;
  std::string layer_order;

  void add(const std::string& key, long long v) { table[key] += v; }

  long long get(const std::string& key) const {
    auto it = table.find(key);
    return it == table.end() ? 0 : it->second;
  }

  Counters& operator+=(const Counters& other) {
    for (const auto& [k, v] : other.table) table[k] += v;
    layer_order += other.layer_order;
    return *this;
  }

  bool operator==(const Counters& other) const { return table == other.table; }
};

}  // namespace stair
