#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace navgen {

using NodeId = std::int32_t;

inline constexpr const char* kWorldSchema = "navgen-world/1";

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  bool operator==(const Vec3&) const = default;
};

struct Node {
  NodeId id = 0;
  Vec3 position;
  std::string room_label;
  std::vector<std::string> landmarks;
  std::vector<double> visual_feature;
  bool operator==(const Node&) const = default;
};

struct Edge {
  NodeId a = 0;
  NodeId b = 0;
  double length = 0.0;
};

// Immutable navigation graph. Node ids are dense, 0..size()-1. All-pairs
// shortest-path distances are computed at construction so concurrent
// readers never mutate shared state.
class EnvGraph {
 public:
  EnvGraph() = default;
  // Validates ids, uniform feature dimension, no self loops, no duplicate
  // edges and that every node has a neighbor. Edge lengths are derived from
  // node positions. Connectivity is not required here; see is_connected().
  EnvGraph(std::string env_id, std::vector<Node> nodes, std::vector<std::pair<NodeId, NodeId>> edges);

  const std::string& env_id() const { return env_id_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  bool contains(NodeId id) const { return id >= 0 && static_cast<std::size_t>(id) < nodes_.size(); }

  const Node& node(NodeId id) const;
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  // Ascending neighbor ids.
  std::span<const NodeId> neighbors(NodeId id) const;
  bool adjacent(NodeId u, NodeId v) const;
  double edge_length(NodeId u, NodeId v) const;

  bool is_connected() const { return connected_; }
  // Shortest-path distance; +inf when v is unreachable from u.
  double distance(NodeId u, NodeId v) const;

  bool operator==(const EnvGraph& other) const;

 private:
  std::string env_id_;
  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<NodeId>> adjacency_;
  std::vector<double> dist_;
  std::size_t feature_dim_ = 0;
  bool connected_ = false;
};

struct Action {
  enum class Kind { kMove, kStop };
  Kind kind = Kind::kStop;
  NodeId target = -1;

  static Action move_to(NodeId v) { return Action{Kind::kMove, v}; }
  static Action stop() { return Action{Kind::kStop, -1}; }
  bool is_stop() const { return kind == Kind::kStop; }
  bool operator==(const Action&) const = default;
  // Wire encoding: target node id, or -1 for STOP.
  std::int64_t code() const { return is_stop() ? -1 : target; }
  static Action from_code(std::int64_t code) { return code < 0 ? stop() : move_to(static_cast<NodeId>(code)); }
};

std::string to_string(const Action& a);

struct ActionEmbedding {
  // [sin heading, cos heading, sin elevation, cos elevation]
  std::array<double, 4> orientation{0.0, 1.0, 0.0, 1.0};
  std::vector<double> target_feature;

  std::size_t dim() const { return 4 + target_feature.size(); }
  std::vector<double> flatten() const;
};

struct AgentState {
  std::string env_id;
  NodeId start = 0;
  NodeId current = 0;
  int t = 0;
  std::vector<NodeId> visited;  // nodes entered by each move; size t
  std::vector<Action> actions;  // moves taken; size t
  bool terminated = false;

  static AgentState begin(const EnvGraph& g, NodeId start);
  // start followed by every visited node.
  std::vector<NodeId> path() const;
};

struct WorldParams {
  int num_nodes = 36;
  int feature_dim = 32;
  std::vector<std::string> room_palette = {"kitchen", "hallway", "bedroom", "bathroom", "office",
                                           "lounge",  "dining",  "garage",  "closet",   "porch"};
  std::vector<std::string> landmark_palette = {"sofa",  "table", "lamp",    "plant", "piano", "fireplace",
                                               "rug",   "stairs", "mirror", "painting", "bed", "shelf"};
  // Probability that a node carries a second landmark. Every node has one.
  double landmark_density = 0.35;
  double spacing = 2.0;
  double jitter = 0.35;
  double elevation_sd = 0.12;
  double extra_edge_prob = 0.3;
  double diagonal_prob = 0.15;
  double noise_amplitude = 0.1;
  double position_amplitude = 0.25;

  void validate() const;
};

nlohmann::json to_json(const WorldParams& p);
WorldParams world_params_from_json(const nlohmann::json& j);

EnvGraph generate_world(std::uint64_t seed, const WorldParams& params, std::string env_id = "");

// MoveTo for every neighbor in ascending id order, then Stop.
std::vector<Action> available_actions(const EnvGraph& g, NodeId node);

AgentState step(const EnvGraph& g, const AgentState& state, const Action& action);

struct PathResult {
  std::vector<NodeId> path;
  double length = 0.0;
};

// Minimal-length path; among equal-length paths, the lexicographically
// smallest node sequence.
PathResult shortest_path(const EnvGraph& g, NodeId u, NodeId v);

// Heading is measured counter-clockwise from +y in the horizontal plane,
// elevation from the horizontal plane. Stop uses the zero-angle orientation
// and the caller-supplied stop feature.
ActionEmbedding action_embedding(const EnvGraph& g, NodeId node, const Action& action,
                                 std::span<const double> stop_feature);

double heading(const Vec3& from, const Vec3& to);
double elevation(const Vec3& from, const Vec3& to);

nlohmann::json to_json(const EnvGraph& g);
EnvGraph graph_from_json(const nlohmann::json& j);
void save_world(const EnvGraph& g, const std::string& path);
EnvGraph load_world(const std::string& path);

}  // namespace navgen
