#include "fsr/errors.hpp"
#include "fsr/tandem.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace fsr {

namespace {

std::string format_double(double v) {
  if (v == kNegInf) return "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "-inf") return kNegInf;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw DataError("lattice: malformed number '" + s + "'");
  return v;
}

bool hmm_transition_allowed(int prev, int next, int num_letters) {
  const int start = num_letters;
  const int end = num_letters + 1;
  if (prev == -1) return next == start;
  if (next == start || prev == end) return false;
  return true;
}

// Arcs in an order where every arc's source node is final before it is read.
std::vector<std::size_t> topological_arcs(const Lattice& lat) {
  std::vector<std::size_t> order(lat.arcs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return lat.arc_start_frame(lat.arcs[a]) < lat.arc_start_frame(lat.arcs[b]);
  });
  return order;
}

}  // namespace

double Lattice::arc_score(const LatticeArc& a, const DecodeParams& params) const {
  return a.ac_score + params.lm_weight * a.lm_score + (is_boundary(a.label) ? 0.0 : params.insertion_penalty);
}

void Lattice::validate() const {
  const auto n = static_cast<int>(nodes.size());
  if (n == 0 || start < 0 || start >= n || end < 0 || end >= n) throw DataError("lattice: missing start/end node");
  if (nodes[static_cast<std::size_t>(start)].frame != 0) throw DataError("lattice: start node is not at frame 0");
  if (nodes[static_cast<std::size_t>(end)].frame != num_frames) throw DataError("lattice: end node is not at frame T");
  for (const auto& a : arcs) {
    if (a.from < 0 || a.from >= n || a.to < 0 || a.to >= n) throw DataError("lattice: arc node out of range");
    if (a.label < 0 || a.label >= num_classes) throw DataError("lattice: arc class out of range");
    // Frames strictly increase along arcs, which also rules out cycles.
    if (nodes[static_cast<std::size_t>(a.to)].frame <= nodes[static_cast<std::size_t>(a.from)].frame)
      throw DataError("lattice: arc spans no frames");
    if (nodes[static_cast<std::size_t>(a.to)].label != a.label) throw DataError("lattice: arc label differs from its target node");
  }
}

double Lattice::path_count() const {
  std::vector<double> count(nodes.size(), 0.0);
  count[static_cast<std::size_t>(start)] = 1.0;
  for (std::size_t i : topological_arcs(*this))
    count[static_cast<std::size_t>(arcs[i].to)] += count[static_cast<std::size_t>(arcs[i].from)];
  return count[static_cast<std::size_t>(end)];
}

Decoding Lattice::best_path(const DecodeParams& params) const {
  std::vector<double> best(nodes.size(), kNegInf);
  std::vector<int> via(nodes.size(), -1);
  best[static_cast<std::size_t>(start)] = 0.0;
  for (std::size_t i : topological_arcs(*this)) {
    const auto& a = arcs[i];
    const double from = best[static_cast<std::size_t>(a.from)];
    if (from == kNegInf) continue;
    const double v = from + arc_score(a, params);
    if (v > best[static_cast<std::size_t>(a.to)]) {
      best[static_cast<std::size_t>(a.to)] = v;
      via[static_cast<std::size_t>(a.to)] = static_cast<int>(i);
    }
  }
  Decoding out;
  out.score = best[static_cast<std::size_t>(end)];
  if (out.score == kNegInf) throw DataError("lattice: no complete path");
  for (int node = end; node != start;) {
    const auto& a = arcs[static_cast<std::size_t>(via[static_cast<std::size_t>(node)])];
    out.segmentation.push_back({arc_start_frame(a), arc_end_frame(a), a.label});
    node = a.from;
  }
  std::reverse(out.segmentation.begin(), out.segmentation.end());
  for (const auto& s : out.segmentation)
    if (!is_boundary(s.label)) out.letters.push_back(s.label);
  return out;
}

std::vector<Segmentation> Lattice::enumerate_paths(std::size_t limit) const {
  std::vector<std::vector<std::size_t>> out_arcs(nodes.size());
  for (std::size_t i = 0; i < arcs.size(); ++i) out_arcs[static_cast<std::size_t>(arcs[i].from)].push_back(i);
  std::vector<Segmentation> paths;
  Segmentation current;
  auto visit = [&](auto&& self, int node) -> void {
    if (paths.size() >= limit) return;
    if (node == end) {
      paths.push_back(current);
      return;
    }
    for (std::size_t i : out_arcs[static_cast<std::size_t>(node)]) {
      const auto& a = arcs[i];
      current.push_back({arc_start_frame(a), arc_end_frame(a), a.label});
      self(self, a.to);
      current.pop_back();
    }
  };
  visit(visit, start);
  return paths;
}

std::string Lattice::to_text(const LabelAlphabet& alphabet) const {
  std::ostringstream os;
  os << "utterance " << (utterance.empty() ? "-" : utterance) << "\n";
  os << "frames " << num_frames << "\n";
  os << "classes " << num_classes << "\n";
  os << "start " << start << "\n";
  os << "end " << end << "\n";
  os << "nodes " << nodes.size() << "\n";
  for (std::size_t i = 0; i < nodes.size(); ++i)
    os << "N " << i << " " << nodes[i].frame << " " << (nodes[i].label < 0 ? "-" : alphabet.symbol(nodes[i].label)) << "\n";
  os << "arcs " << arcs.size() << "\n";
  for (const auto& a : arcs)
    os << a.from << " " << a.to << " " << alphabet.symbol(a.label) << " " << format_double(a.ac_score) << " "
       << format_double(a.lm_score) << "\n";
  return os.str();
}

Lattice Lattice::from_text(const std::string& text, const LabelAlphabet& alphabet) {
  std::istringstream is(text);
  Lattice lat;
  auto expect = [&](const std::string& key) {
    std::string k;
    if (!(is >> k) || k != key) throw DataError("lattice: expected '" + key + "'");
  };
  expect("utterance");
  is >> lat.utterance;
  if (lat.utterance == "-") lat.utterance.clear();
  expect("frames");
  is >> lat.num_frames;
  expect("classes");
  is >> lat.num_classes;
  if (lat.num_classes != alphabet.num_classes()) throw DataError("lattice: class count differs from the alphabet");
  expect("start");
  is >> lat.start;
  expect("end");
  is >> lat.end;
  expect("nodes");
  std::size_t n = 0;
  is >> n;
  for (std::size_t i = 0; i < n; ++i) {
    std::string tag, label;
    std::size_t id = 0;
    LatticeNode node;
    if (!(is >> tag >> id >> node.frame >> label) || tag != "N" || id != i) throw DataError("lattice: malformed node line");
    node.label = label == "-" ? -1 : alphabet.index_of(label);
    lat.nodes.push_back(node);
  }
  expect("arcs");
  std::size_t m = 0;
  is >> m;
  for (std::size_t i = 0; i < m; ++i) {
    std::string label, ac, lm;
    LatticeArc a;
    if (!(is >> a.from >> a.to >> label >> ac >> lm)) throw DataError("lattice: malformed arc line");
    a.label = alphabet.index_of(label);
    a.ac_score = parse_double(ac);
    a.lm_score = parse_double(lm);
    lat.arcs.push_back(a);
  }
  if (!is && !is.eof()) throw DataError("lattice: malformed file");
  lat.validate();
  return lat;
}

Lattice make_lattice(const HmmModel& model, const Matrix& emissions, const DecodeParams& params, double beam,
                     const std::string& utterance) {
  const int T = static_cast<int>(emissions.rows());
  const int C = model.num_classes();
  const int L = model.num_letters();
  if (T < 1 || emissions.cols() != model.total_states()) throw DataError("lattice: emission table shape mismatch");
  if (!(beam >= 0.0)) throw ConfigError("lattice.beam: must be >= 0");

  std::vector<Matrix> seg(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) seg[static_cast<std::size_t>(c)] = segment_acoustic_scores(model, emissions, c);
  // Node (b, p): frame boundary b, incoming class p; column C is the start label.
  const int kStart = C;
  auto lm = [&](int p, int c) { return p == kStart ? 0.0 : model.lm.log_prob(p, c); };
  auto allowed = [&](int p, int c) { return hmm_transition_allowed(p == kStart ? -1 : p, c, L); };
  auto trans = [&](int p, int c) {
    return params.lm_weight * lm(p, c) + (model.is_boundary(c) ? 0.0 : params.insertion_penalty);
  };

  Matrix fwd = Matrix::Constant(T + 1, C + 1, kNegInf);
  Eigen::MatrixXi fwd_from = Eigen::MatrixXi::Constant(T + 1, C + 1, -1);
  Eigen::MatrixXi fwd_prev = Eigen::MatrixXi::Constant(T + 1, C + 1, -1);
  fwd(0, kStart) = 0.0;
  for (int t0 = 0; t0 < T; ++t0)
    for (int p = 0; p <= C; ++p) {
      if (fwd(t0, p) == kNegInf) continue;
      for (int c = 0; c < C; ++c) {
        if (!allowed(p, c)) continue;
        const double in = fwd(t0, p) + trans(p, c);
        for (int t1 = t0; t1 < T; ++t1) {
          const double ac = seg[static_cast<std::size_t>(c)](t0, t1);
          if (ac == kNegInf) continue;
          if (in + ac > fwd(t1 + 1, c)) {
            fwd(t1 + 1, c) = in + ac;
            fwd_from(t1 + 1, c) = t0;
            fwd_prev(t1 + 1, c) = p;
          }
        }
      }
    }
  const int end_label = model.end_class();
  const double best = fwd(T, end_label);
  if (best == kNegInf) throw DataError("lattice: no complete path (sequence too short)");

  Matrix bwd = Matrix::Constant(T + 1, C + 1, kNegInf);
  bwd(T, end_label) = 0.0;
  for (int t0 = T - 1; t0 >= 0; --t0)
    for (int p = 0; p <= C; ++p)
      for (int c = 0; c < C; ++c) {
        if (!allowed(p, c)) continue;
        for (int t1 = t0; t1 < T; ++t1) {
          const double ac = seg[static_cast<std::size_t>(c)](t0, t1);
          if (ac == kNegInf || bwd(t1 + 1, c) == kNegInf) continue;
          bwd(t0, p) = std::max(bwd(t0, p), trans(p, c) + ac + bwd(t1 + 1, c));
        }
      }

  struct RawArc {
    int t0, p, t1, c;
    bool operator<(const RawArc& o) const { return std::tie(t0, p, t1, c) < std::tie(o.t0, o.p, o.t1, o.c); }
  };
  std::vector<RawArc> raw;
  const double threshold = best - beam;
  for (int t0 = 0; t0 < T; ++t0)
    for (int p = 0; p <= C; ++p) {
      if (fwd(t0, p) == kNegInf) continue;
      for (int c = 0; c < C; ++c) {
        if (!allowed(p, c)) continue;
        const double in = fwd(t0, p) + trans(p, c);
        for (int t1 = t0; t1 < T; ++t1) {
          const double ac = seg[static_cast<std::size_t>(c)](t0, t1);
          if (ac == kNegInf || bwd(t1 + 1, c) == kNegInf) continue;
          if (in + ac + bwd(t1 + 1, c) >= threshold) raw.push_back({t0, p, t1, c});
        }
      }
    }
  // The Viterbi path is always kept.
  for (int b = T, c = end_label; b > 0;) {
    const int t0 = fwd_from(b, c);
    const int p = fwd_prev(b, c);
    raw.push_back({t0, p, b - 1, c});
    b = t0;
    c = p;
  }
  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end(),
                        [](const RawArc& a, const RawArc& b) { return !(a < b) && !(b < a); }),
            raw.end());

  Lattice lat;
  lat.utterance = utterance;
  lat.num_frames = T;
  lat.num_classes = C;
  std::map<std::pair<int, int>, int> node_id;  // (frame, label with start = -1)
  for (const auto& a : raw) {
    node_id.emplace(std::make_pair(a.t0, a.p == kStart ? -1 : a.p), 0);
    node_id.emplace(std::make_pair(a.t1 + 1, a.c), 0);
  }
  for (auto& [key, id] : node_id) {
    id = static_cast<int>(lat.nodes.size());
    lat.nodes.push_back({key.first, key.second});
  }
  lat.start = node_id.at({0, -1});
  lat.end = node_id.at({T, end_label});
  for (const auto& a : raw)
    lat.arcs.push_back({node_id.at({a.t0, a.p == kStart ? -1 : a.p}), node_id.at({a.t1 + 1, a.c}), a.c,
                        seg[static_cast<std::size_t>(a.c)](a.t0, a.t1), lm(a.p, a.c)});
  std::stable_sort(lat.arcs.begin(), lat.arcs.end(), [&](const LatticeArc& x, const LatticeArc& y) {
    return std::tie(lat.nodes[static_cast<std::size_t>(x.from)].frame, x.from, x.to) <
           std::tie(lat.nodes[static_cast<std::size_t>(y.from)].frame, y.from, y.to);
  });
  return lat;
}

}  // namespace fsr
