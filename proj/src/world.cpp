#include "navgen/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include "navgen/error.hpp"
#include "navgen/rng.hpp"

namespace navgen {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTieTolerance = 1e-9;

double euclid(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Fixed pseudo-random direction for a token; shared by all worlds so that the
// same label always produces the same feature contribution.
std::vector<double> token_basis(std::string_view token, std::size_t dim) {
  Rng rng(hash_string(token), 0x5eed);
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

std::vector<double> position_basis(const Vec3& p, std::size_t dim) {
  const auto qx = static_cast<std::int64_t>(std::llround(p.x * 4.0));
  const auto qy = static_cast<std::int64_t>(std::llround(p.y * 4.0));
  Rng rng(mix64(static_cast<std::uint64_t>(qx), static_cast<std::uint64_t>(qy)), 0x905);
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal() / std::sqrt(static_cast<double>(dim));
  return v;
}

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[std::max(a, b)] = std::min(a, b);
    return true;
  }
};

}  // namespace

EnvGraph::EnvGraph(std::string env_id, std::vector<Node> nodes, std::vector<std::pair<NodeId, NodeId>> edges)
    : env_id_(std::move(env_id)), nodes_(std::move(nodes)) {
  const auto n = nodes_.size();
  if (n == 0) throw DataError("graph '" + env_id_ + "' has no nodes");
  feature_dim_ = nodes_.front().visual_feature.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (nodes_[i].id != static_cast<NodeId>(i))
      throw DataError("graph '" + env_id_ + "': node ids must be dense and ordered (expected " + std::to_string(i) +
                      ", got " + std::to_string(nodes_[i].id) + ")");
    if (nodes_[i].visual_feature.size() != feature_dim_)
      throw DataError("graph '" + env_id_ + "': node " + std::to_string(i) + " has feature dimension " +
                      std::to_string(nodes_[i].visual_feature.size()) + ", expected " + std::to_string(feature_dim_));
  }

  adjacency_.assign(n, {});
  for (auto [a, b] : edges) {
    if (!contains(a) || !contains(b))
      throw DataError("graph '" + env_id_ + "': edge references unknown node");
    if (a == b) throw DataError("graph '" + env_id_ + "': self loop at node " + std::to_string(a));
    if (a > b) std::swap(a, b);
    if (std::find(adjacency_[a].begin(), adjacency_[a].end(), b) != adjacency_[a].end())
      throw DataError("graph '" + env_id_ + "': duplicate edge " + std::to_string(a) + "-" + std::to_string(b));
    adjacency_[a].push_back(b);
    adjacency_[b].push_back(a);
    edges_.push_back(Edge{a, b, euclid(nodes_[a].position, nodes_[b].position)});
  }
  std::sort(edges_.begin(), edges_.end(), [](const Edge& x, const Edge& y) {
    return std::tie(x.a, x.b) < std::tie(y.a, y.b);
  });
  for (std::size_t i = 0; i < n; ++i) {
    auto& adj = adjacency_[i];
    std::sort(adj.begin(), adj.end());
    if (adj.empty()) throw DataError("graph '" + env_id_ + "': node " + std::to_string(i) + " has no neighbors");
  }

  // All-pairs Dijkstra.
  dist_.assign(n * n, kInf);
  using Item = std::pair<double, NodeId>;
  for (std::size_t s = 0; s < n; ++s) {
    double* d = dist_.data() + s * n;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[s] = 0.0;
    pq.emplace(0.0, static_cast<NodeId>(s));
    while (!pq.empty()) {
      auto [du, u] = pq.top();
      pq.pop();
      if (du > d[u]) continue;
      for (NodeId v : adjacency_[u]) {
        const double nd = du + edge_length(u, v);
        if (nd < d[v]) {
          d[v] = nd;
          pq.emplace(nd, v);
        }
      }
    }
  }
  connected_ = std::all_of(dist_.begin(), dist_.begin() + static_cast<std::ptrdiff_t>(n),
                           [](double x) { return std::isfinite(x); });
}

const Node& EnvGraph::node(NodeId id) const {
  if (!contains(id)) throw LookupError("unknown node " + std::to_string(id) + " in graph '" + env_id_ + "'");
  return nodes_[static_cast<std::size_t>(id)];
}

std::span<const NodeId> EnvGraph::neighbors(NodeId id) const {
  if (!contains(id)) throw LookupError("unknown node " + std::to_string(id) + " in graph '" + env_id_ + "'");
  return adjacency_[static_cast<std::size_t>(id)];
}

bool EnvGraph::adjacent(NodeId u, NodeId v) const {
  if (!contains(u) || !contains(v)) return false;
  const auto& adj = adjacency_[static_cast<std::size_t>(u)];
  return std::binary_search(adj.begin(), adj.end(), v);
}

double EnvGraph::edge_length(NodeId u, NodeId v) const {
  if (!adjacent(u, v))
    throw PreconditionError("nodes " + std::to_string(u) + " and " + std::to_string(v) + " are not adjacent");
  return euclid(nodes_[static_cast<std::size_t>(u)].position, nodes_[static_cast<std::size_t>(v)].position);
}

double EnvGraph::distance(NodeId u, NodeId v) const {
  if (!contains(u)) throw LookupError("unknown node " + std::to_string(u) + " in graph '" + env_id_ + "'");
  if (!contains(v)) throw LookupError("unknown node " + std::to_string(v) + " in graph '" + env_id_ + "'");
  return dist_[static_cast<std::size_t>(u) * nodes_.size() + static_cast<std::size_t>(v)];
}

bool EnvGraph::operator==(const EnvGraph& other) const {
  if (env_id_ != other.env_id_ || nodes_ != other.nodes_ || edges_.size() != other.edges_.size()) return false;
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    if (edges_[i].a != other.edges_[i].a || edges_[i].b != other.edges_[i].b) return false;
  }
  return true;
}

std::string to_string(const Action& a) { return a.is_stop() ? "STOP" : "MoveTo(" + std::to_string(a.target) + ")"; }

std::vector<double> ActionEmbedding::flatten() const {
  std::vector<double> out(orientation.begin(), orientation.end());
  out.insert(out.end(), target_feature.begin(), target_feature.end());
  return out;
}

AgentState AgentState::begin(const EnvGraph& g, NodeId start) {
  g.node(start);
  AgentState s;
  s.env_id = g.env_id();
  s.start = start;
  s.current = start;
  return s;
}

std::vector<NodeId> AgentState::path() const {
  std::vector<NodeId> p;
  p.reserve(visited.size() + 1);
  p.push_back(start);
  p.insert(p.end(), visited.begin(), visited.end());
  return p;
}

void WorldParams::validate() const {
  if (num_nodes < 8 || num_nodes > 200)
    throw ConfigError("world num_nodes must be in [8, 200], got " + std::to_string(num_nodes));
  if (feature_dim < 8) throw ConfigError("world feature_dim must be >= 8, got " + std::to_string(feature_dim));
  if (room_palette.empty()) throw ConfigError("world room_palette is empty");
  if (landmark_palette.empty()) throw ConfigError("world landmark_palette is empty");
  if (landmark_density < 0.0 || landmark_density > 1.0) throw ConfigError("world landmark_density must be in [0, 1]");
  if (spacing <= 0.0) throw ConfigError("world spacing must be positive");
  if (extra_edge_prob < 0.0 || extra_edge_prob > 1.0 || diagonal_prob < 0.0 || diagonal_prob > 1.0)
    throw ConfigError("world edge probabilities must be in [0, 1]");
}

nlohmann::json to_json(const WorldParams& p) {
  return {{"num_nodes", p.num_nodes},
          {"feature_dim", p.feature_dim},
          {"room_palette", p.room_palette},
          {"landmark_palette", p.landmark_palette},
          {"landmark_density", p.landmark_density},
          {"spacing", p.spacing},
          {"jitter", p.jitter},
          {"elevation_sd", p.elevation_sd},
          {"extra_edge_prob", p.extra_edge_prob},
          {"diagonal_prob", p.diagonal_prob},
          {"noise_amplitude", p.noise_amplitude},
          {"position_amplitude", p.position_amplitude}};
}

WorldParams world_params_from_json(const nlohmann::json& j) {
  WorldParams p;
  try {
    p.num_nodes = j.value("num_nodes", p.num_nodes);
    p.feature_dim = j.value("feature_dim", p.feature_dim);
    p.room_palette = j.value("room_palette", p.room_palette);
    p.landmark_palette = j.value("landmark_palette", p.landmark_palette);
    p.landmark_density = j.value("landmark_density", p.landmark_density);
    p.spacing = j.value("spacing", p.spacing);
    p.jitter = j.value("jitter", p.jitter);
    p.elevation_sd = j.value("elevation_sd", p.elevation_sd);
    p.extra_edge_prob = j.value("extra_edge_prob", p.extra_edge_prob);
    p.diagonal_prob = j.value("diagonal_prob", p.diagonal_prob);
    p.noise_amplitude = j.value("noise_amplitude", p.noise_amplitude);
    p.position_amplitude = j.value("position_amplitude", p.position_amplitude);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid world params: ") + e.what());
  }
  return p;
}

EnvGraph generate_world(std::uint64_t seed, const WorldParams& params, std::string env_id) {
  params.validate();
  if (env_id.empty()) env_id = "world-" + std::to_string(seed);
  const int n = params.num_nodes;
  const auto dim = static_cast<std::size_t>(params.feature_dim);
  Rng rng(seed, hash_string("world"));

  // Jittered grid layout, filled row-major.
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<Node> nodes(static_cast<std::size_t>(n));
  std::vector<std::pair<int, int>> cell(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, c = i % cols;
    cell[i] = {r, c};
    auto& nd = nodes[i];
    nd.id = i;
    nd.position = Vec3{c * params.spacing + rng.uniform(-params.jitter, params.jitter),
                       r * params.spacing + rng.uniform(-params.jitter, params.jitter),
                       params.elevation_sd * rng.normal()};
  }
  auto index_of = [&](int r, int c) -> int {
    if (r < 0 || c < 0 || c >= cols) return -1;
    const int i = r * cols + c;
    return i < n ? i : -1;
  };

  // Candidate edges: 4-neighborhood, plus diagonals with low probability.
  std::vector<std::pair<NodeId, NodeId>> candidates;
  for (int i = 0; i < n; ++i) {
    auto [r, c] = cell[i];
    for (int j : {index_of(r, c + 1), index_of(r + 1, c)}) {
      if (j >= 0) candidates.emplace_back(i, j);
    }
    for (int j : {index_of(r + 1, c + 1), index_of(r + 1, c - 1)}) {
      if (j >= 0 && rng.bernoulli(params.diagonal_prob)) candidates.emplace_back(std::min(i, j), std::max(i, j));
    }
  }
  rng.shuffle(candidates.begin(), candidates.end());

  // Random spanning tree first, then extra edges to create cycles.
  DisjointSet dsu(n);
  std::vector<std::pair<NodeId, NodeId>> chosen;
  std::vector<std::pair<NodeId, NodeId>> rest;
  for (auto e : candidates) {
    if (dsu.unite(e.first, e.second)) {
      chosen.push_back(e);
    } else {
      rest.push_back(e);
    }
  }
  for (auto e : rest) {
    if (rng.bernoulli(params.extra_edge_prob)) chosen.push_back(e);
  }
  std::sort(chosen.begin(), chosen.end());

  // Rooms: Voronoi regions around randomly chosen centers on the grid.
  const int room_count = std::max(2, n / 3);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<int> centers(order.begin(), order.begin() + room_count);
  std::vector<std::string> room_names(static_cast<std::size_t>(room_count));
  for (auto& name : room_names) name = params.room_palette[rng.below(params.room_palette.size())];
  for (int i = 0; i < n; ++i) {
    int best = 0;
    int best_d = std::numeric_limits<int>::max();
    for (int k = 0; k < room_count; ++k) {
      auto [r0, c0] = cell[centers[k]];
      const int d = std::abs(cell[i].first - r0) + std::abs(cell[i].second - c0);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    nodes[i].room_label = room_names[best];
  }

  // Landmarks and features.
  for (auto& nd : nodes) {
    const auto first = rng.below(params.landmark_palette.size());
    nd.landmarks.push_back(params.landmark_palette[first]);
    if (params.landmark_palette.size() > 1 && rng.bernoulli(params.landmark_density)) {
      auto second = rng.below(params.landmark_palette.size() - 1);
      if (second >= first) ++second;
      nd.landmarks.push_back(params.landmark_palette[second]);
    }
    std::vector<double> f = token_basis(nd.room_label, dim);
    for (const auto& lm : nd.landmarks) {
      const auto b = token_basis(lm, dim);
      for (std::size_t d = 0; d < dim; ++d) f[d] += b[d] / static_cast<double>(nd.landmarks.size());
    }
    const auto pos = position_basis(nd.position, dim);
    for (std::size_t d = 0; d < dim; ++d) {
      f[d] += params.position_amplitude * pos[d] + params.noise_amplitude * rng.normal() / std::sqrt(double(dim));
    }
    nd.visual_feature = std::move(f);
  }

  EnvGraph g(std::move(env_id), std::move(nodes), std::move(chosen));
  if (!g.is_connected()) throw GenerationError("generated world is not connected");
  return g;
}

std::vector<Action> available_actions(const EnvGraph& g, NodeId node) {
  const auto nbrs = g.neighbors(node);
  std::vector<Action> out;
  out.reserve(nbrs.size() + 1);
  for (NodeId v : nbrs) out.push_back(Action::move_to(v));
  out.push_back(Action::stop());
  return out;
}

AgentState step(const EnvGraph& g, const AgentState& state, const Action& action) {
  if (state.terminated) throw PreconditionError("step called on a terminated episode");
  if (state.env_id != g.env_id())
    throw PreconditionError("agent state belongs to '" + state.env_id + "', not '" + g.env_id() + "'");
  AgentState next = state;
  if (action.is_stop()) {
    next.terminated = true;
    return next;
  }
  if (!g.adjacent(state.current, action.target))
    throw PreconditionError("illegal move from " + std::to_string(state.current) + " to " +
                            std::to_string(action.target));
  next.current = action.target;
  next.visited.push_back(action.target);
  next.actions.push_back(action);
  next.t += 1;
  return next;
}

PathResult shortest_path(const EnvGraph& g, NodeId u, NodeId v) {
  const double total = g.distance(u, v);
  if (!std::isfinite(total))
    throw UnreachableError("node " + std::to_string(v) + " is unreachable from " + std::to_string(u));
  PathResult out;
  out.path.push_back(u);
  NodeId x = u;
  while (x != v) {
    const double remaining = g.distance(x, v);
    NodeId next = -1;
    for (NodeId y : g.neighbors(x)) {
      const double via = g.edge_length(x, y) + g.distance(y, v);
      if (std::abs(via - remaining) <= kTieTolerance * std::max(1.0, remaining)) {
        next = y;
        break;  // neighbors are ascending, so the first match is lexicographically smallest
      }
    }
    if (next < 0) throw UnreachableError("shortest-path reconstruction failed");
    out.length += g.edge_length(x, next);
    out.path.push_back(next);
    x = next;
  }
  return out;
}

double heading(const Vec3& from, const Vec3& to) { return std::atan2(-(to.x - from.x), to.y - from.y); }

double elevation(const Vec3& from, const Vec3& to) {
  const double dx = to.x - from.x, dy = to.y - from.y;
  return std::atan2(to.z - from.z, std::sqrt(dx * dx + dy * dy));
}

ActionEmbedding action_embedding(const EnvGraph& g, NodeId node, const Action& action,
                                 std::span<const double> stop_feature) {
  const auto& from = g.node(node);
  ActionEmbedding e;
  if (action.is_stop()) {
    if (stop_feature.size() != g.feature_dim())
      throw PreconditionError("stop feature has dimension " + std::to_string(stop_feature.size()) + ", expected " +
                              std::to_string(g.feature_dim()));
    e.target_feature.assign(stop_feature.begin(), stop_feature.end());
    return e;
  }
  if (!g.adjacent(node, action.target))
    throw PreconditionError("illegal action " + to_string(action) + " at node " + std::to_string(node));
  const auto& to = g.node(action.target);
  const double phi = heading(from.position, to.position);
  const double theta = elevation(from.position, to.position);
  e.orientation = {std::sin(phi), std::cos(phi), std::sin(theta), std::cos(theta)};
  e.target_feature = to.visual_feature;
  return e;
}

nlohmann::json to_json(const EnvGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& nd : g.nodes()) {
    nodes.push_back({{"id", nd.id},
                     {"position", {nd.position.x, nd.position.y, nd.position.z}},
                     {"room", nd.room_label},
                     {"landmarks", nd.landmarks},
                     {"feature", nd.visual_feature}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({{"a", e.a}, {"b", e.b}, {"length", e.length}});
  return {{"schema", kWorldSchema},
          {"env_id", g.env_id()},
          {"feature_dim", g.feature_dim()},
          {"nodes", std::move(nodes)},
          {"edges", std::move(edges)}};
}

EnvGraph graph_from_json(const nlohmann::json& j) {
  try {
    if (j.value("schema", std::string()) != kWorldSchema)
      throw DataError("world schema mismatch: expected '" + std::string(kWorldSchema) + "', got '" +
                      j.value("schema", std::string("<missing>")) + "'");
    std::vector<Node> nodes;
    for (const auto& jn : j.at("nodes")) {
      Node nd;
      nd.id = jn.at("id").get<NodeId>();
      const auto& p = jn.at("position");
      nd.position = Vec3{p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()};
      nd.room_label = jn.at("room").get<std::string>();
      nd.landmarks = jn.at("landmarks").get<std::vector<std::string>>();
      nd.visual_feature = jn.at("feature").get<std::vector<double>>();
      nodes.push_back(std::move(nd));
    }
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (const auto& je : j.at("edges")) edges.emplace_back(je.at("a").get<NodeId>(), je.at("b").get<NodeId>());
    EnvGraph g(j.at("env_id").get<std::string>(), std::move(nodes), std::move(edges));
    if (!g.is_connected()) throw DataError("world '" + g.env_id() + "' is not connected");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed world document: ") + e.what());
  }
}

void save_world(const EnvGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json(g).dump() << '\n';
}

EnvGraph load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return graph_from_json(j);
}

}  // namespace navgen
