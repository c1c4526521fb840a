#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/lens/lens_task.hpp"
#include "simflow/tasks/linear_gaussian.hpp"
#include "simflow/tasks/lotka_volterra.hpp"
#include "simflow/tasks/sir.hpp"
#include "simflow/tasks/slcp.hpp"
#include "simflow/tasks/task.hpp"
#include "simflow/tasks/two_moons.hpp"

namespace simflow::tasks {

class unknown_task : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string canonical_task_name(const std::string& name) {
    if (name == "lotka_volterra" || name == "lv") return "lotka_volterra";
    if (name == "sir") return "sir";
    if (name == "two_moons" || name == "tm") return "two_moons";
    if (name == "slcp") return "slcp";
    if (name == "linear_gaussian" || name == "toy") return "linear_gaussian";
    if (name == "lens" || name == "lensing") return "lens";
    throw unknown_task("unknown task '" + name + "'");
}

/// Benchmark tasks; "lens" is built through make_task but not listed.
inline std::vector<std::string> task_names() { return {"lotka_volterra", "sir", "two_moons", "slcp", "linear_gaussian"}; }

inline std::unique_ptr<task> make_task(const std::string& name, const json& constants) {
    const auto n = canonical_task_name(name);
    const auto& c = constants.at(n);
    if (n == "lotka_volterra") return std::make_unique<lotka_volterra>(c);
    if (n == "sir") return std::make_unique<sir>(c);
    if (n == "two_moons") return std::make_unique<two_moons>(c);
    if (n == "slcp") return std::make_unique<slcp>(c);
    if (n == "lens") return std::make_unique<lens::lens_task>(c);
    return std::make_unique<linear_gaussian>(c);
}

inline std::unique_ptr<task> make_task(const std::string& name) { return make_task(name, load_task_constants()); }

} // namespace simflow::tasks
