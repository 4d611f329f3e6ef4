#include "routeq/instance.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "routeq/rng.hpp"

namespace routeq {

using nlohmann::json;

Eigen::MatrixXd distance_matrix(const Instance& instance) {
  const int total = instance.n_nodes();
  Eigen::MatrixXd d(total, total);
  for (int i = 0; i < total; ++i) {
    d(i, i) = 0.0;
    for (int j = i + 1; j < total; ++j) {
      const double dist = instance.distance(i, j);
      d(i, j) = dist;
      d(j, i) = dist;
    }
  }
  return d;
}

Instance generate_instance(int n, int m, int capacity, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_instance: n must be >= 1");
  if (m < 1) throw std::invalid_argument("generate_instance: m must be >= 1");
  if (capacity < 9)
    throw std::invalid_argument(
        "generate_instance: capacity must be >= 9 so every customer is servable");

  Rng rng(mix_seed(seed, 0x696e7374ULL));
  Instance out;
  out.customers.resize(n, 2);
  out.demands.resize(n);
  out.depots.resize(m, 2);
  out.capacity = capacity;

  for (int i = 0; i < n; ++i) {
    out.customers(i, 0) = rng.uniform();
    out.customers(i, 1) = rng.uniform();
  }
  for (int i = 0; i < n; ++i)
    out.demands(i) = static_cast<int>(rng.uniform_int(1, 9));
  for (int j = 0; j < m; ++j) {
    out.depots(j, 0) = rng.uniform();
    out.depots(j, 1) = rng.uniform();
  }

  std::ostringstream name;
  name << "g-n" << n << "-m" << m << "-c" << capacity << "-s" << seed;
  out.id = name.str();
  return out;
}

int default_capacity(int n) {
  if (n < 1) throw std::invalid_argument("default_capacity: n must be >= 1");
  if (n <= 20) return 30;
  if (n <= 50) return 40;
  return 50;
}

namespace {

json instance_to_json(const Instance& inst) {
  json customers = json::array();
  for (int i = 0; i < inst.n(); ++i) {
    customers.push_back(
        {{"xy", {inst.customers(i, 0), inst.customers(i, 1)}},
         {"demand", inst.demands(i)}});
  }
  json depots = json::array();
  for (int j = 0; j < inst.m(); ++j)
    depots.push_back({inst.depots(j, 0), inst.depots(j, 1)});
  return json{{"id", inst.id},
              {"capacity", inst.capacity},
              {"depots", depots},
              {"customers", customers}};
}

[[noreturn]] void fail(std::size_t line_no, const std::string& what) {
  throw std::runtime_error("load_dataset: line " + std::to_string(line_no) +
                           ": " + what);
}

double coord_in_unit_square(const json& v, std::size_t line_no, const char* field) {
  if (!v.is_number()) fail(line_no, std::string("field '") + field + "' must be a number");
  const double x = v.get<double>();
  if (x < 0.0 || x > 1.0)
    fail(line_no, std::string("field '") + field + "' out of range [0,1]");
  return x;
}

Instance instance_from_json(const json& obj, std::size_t line_no) {
  if (!obj.is_object()) fail(line_no, "expected a JSON object");
  for (const char* key : {"id", "capacity", "depots", "customers"})
    if (!obj.contains(key)) fail(line_no, std::string("missing field '") + key + "'");

  Instance inst;
  if (!obj["id"].is_string()) fail(line_no, "field 'id' must be a string");
  inst.id = obj["id"].get<std::string>();
  if (!obj["capacity"].is_number_integer() || obj["capacity"].get<long>() < 1)
    fail(line_no, "field 'capacity' must be a positive integer");
  inst.capacity = obj["capacity"].get<int>();

  const json& depots = obj["depots"];
  if (!depots.is_array() || depots.empty())
    fail(line_no, "field 'depots' must be a non-empty array");
  inst.depots.resize(static_cast<int>(depots.size()), 2);
  for (std::size_t j = 0; j < depots.size(); ++j) {
    if (!depots[j].is_array() || depots[j].size() != 2)
      fail(line_no, "field 'depots' entries must be [x,y] pairs");
    inst.depots(static_cast<int>(j), 0) = coord_in_unit_square(depots[j][0], line_no, "depots.x");
    inst.depots(static_cast<int>(j), 1) = coord_in_unit_square(depots[j][1], line_no, "depots.y");
  }

  const json& customers = obj["customers"];
  if (!customers.is_array() || customers.empty())
    fail(line_no, "field 'customers' must be a non-empty array");
  inst.customers.resize(static_cast<int>(customers.size()), 2);
  inst.demands.resize(static_cast<int>(customers.size()));
  for (std::size_t i = 0; i < customers.size(); ++i) {
    const json& c = customers[i];
    if (!c.is_object() || !c.contains("xy") || !c.contains("demand"))
      fail(line_no, "field 'customers' entries must have 'xy' and 'demand'");
    if (!c["xy"].is_array() || c["xy"].size() != 2)
      fail(line_no, "field 'customers.xy' must be an [x,y] pair");
    const int row = static_cast<int>(i);
    inst.customers(row, 0) = coord_in_unit_square(c["xy"][0], line_no, "customers.xy.x");
    inst.customers(row, 1) = coord_in_unit_square(c["xy"][1], line_no, "customers.xy.y");
    if (!c["demand"].is_number_integer()) fail(line_no, "field 'demand' must be an integer");
    const long d = c["demand"].get<long>();
    if (d < 1 || d > inst.capacity) fail(line_no, "field 'demand' out of range");
    inst.demands(row) = static_cast<int>(d);
  }
  return inst;
}

}  // namespace

void save_dataset(const std::string& path, const std::vector<Instance>& instances) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  for (const Instance& inst : instances) out << instance_to_json(inst) << '\n';
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

std::vector<Instance> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::vector<Instance> instances;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(line_no, std::string("malformed JSON: ") + e.what());
    }
    instances.push_back(instance_from_json(obj, line_no));
  }
  return instances;
}

bool operator==(const Instance& a, const Instance& b) {
  return a.id == b.id && a.capacity == b.capacity &&
         a.customers == b.customers && a.demands == b.demands &&
         a.depots == b.depots;
}

}  // namespace routeq
